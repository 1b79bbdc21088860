"""Loss terms against hand-derived closed forms and finite differences."""

import math

import numpy as np
import pytest

from moelab.autodiff import Graph, grad_check
from moelab.errors import ArgumentError
from moelab.losses import (
    LossWeights,
    dynamic_loss,
    lm_loss,
    load_balance_loss,
    router_z_loss,
    total_loss,
)
from moelab.routing import select_top_k_batch, select_top_p_batch


# -- language modeling ---------------------------------------------------------


def test_lm_loss_uniform_logits_closed_form():
    # zero logits over V=4: CE = ln 4 per token, z-term = lambda*(ln 4)^2
    m, v, lam = 6, 4, 1e-4
    g = Graph()
    logits = g.constant(np.zeros((m, v)))
    targets = np.arange(m) % v
    got = float(lm_loss(g, logits, targets, lam).values)
    expected = math.log(v) + lam * math.log(v) ** 2
    assert got == pytest.approx(expected, abs=1e-12)


def test_lm_loss_zero_lambda_is_plain_cross_entropy():
    rng = np.random.default_rng(0)
    logits_val = rng.normal(size=(5, 7))
    targets = rng.integers(0, 7, size=5)
    g = Graph()
    got = float(lm_loss(g, g.constant(logits_val), targets, 0.0).values)
    shifted = logits_val - logits_val.max(axis=1, keepdims=True)
    soft = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    expected = -np.mean(np.log(soft[np.arange(5), targets]))
    assert got == pytest.approx(expected, abs=1e-12)


def test_lm_loss_errors():
    g = Graph()
    with pytest.raises(ArgumentError):
        lm_loss(g, g.constant(np.zeros((2, 4))), np.array([0, 9]), 0.0)


# -- load balance ----------------------------------------------------------------


def test_load_balance_uniform_routing_equals_lambda_k():
    # every expert dispatched fraction k/N with uniform probabilities
    n, m, k, lam = 64, 32, 8, 1e-4
    probs = np.full((m, n), 1.0 / n)
    decision = select_top_k_batch(probs, k)
    g = Graph()
    got = float(load_balance_loss(g, decision, g.constant(probs), lam).values)
    assert got == pytest.approx(lam * k, abs=1e-10)
    assert got == pytest.approx(8.0e-4, abs=1e-10)


def test_load_balance_total_collapse():
    # all tokens and all mass on expert 0: loss = lambda * N
    n, m, lam = 64, 16, 1e-4
    probs = np.zeros((m, n))
    probs[:, 0] = 1.0
    decision = select_top_k_batch(probs, 1)
    g = Graph()
    got = float(load_balance_loss(g, decision, g.constant(probs), lam).values)
    assert got == pytest.approx(lam * n, abs=1e-12)
    assert got == pytest.approx(6.4e-3, abs=1e-12)


def test_load_balance_zero_lambda():
    probs = np.full((4, 8), 1.0 / 8)
    g = Graph()
    got = float(load_balance_loss(g, select_top_k_batch(probs, 2), g.constant(probs), 0.0).values)
    assert got == 0.0


def test_load_balance_concentration_increases_loss():
    # hold dispatch at the collapsed configuration; concentrating Q onto the
    # same expert must cost more than uniform Q
    n, m, lam = 8, 4, 1.0
    onehot = np.zeros((m, n))
    onehot[:, 0] = 1.0
    decision = select_top_k_batch(onehot, 1)  # f = e0
    g = Graph()
    uniform_q = float(load_balance_loss(g, decision, g.constant(np.full((m, n), 1.0 / n)), lam).values)
    collapsed_q = float(load_balance_loss(g, decision, g.constant(onehot), lam).values)
    assert uniform_q == pytest.approx(1.0, abs=1e-12)  # N * 1 * (1/N)
    assert collapsed_q == pytest.approx(n, abs=1e-12)
    assert collapsed_q > uniform_q


def test_load_balance_batch_mismatch():
    probs = np.full((4, 8), 1.0 / 8)
    g = Graph()
    with pytest.raises(ArgumentError):
        load_balance_loss(g, select_top_k_batch(probs, 2), g.constant(probs[:3]), 1.0)


# -- dynamic (entropy) --------------------------------------------------------------


def test_dynamic_loss_uniform_is_log_n():
    n, m, lam = 64, 32, 1e-3
    g = Graph()
    got = float(dynamic_loss(g, g.constant(np.full((m, n), 1.0 / n)), lam).values)
    assert got == pytest.approx(lam * math.log(n), abs=1e-10)
    assert got == pytest.approx(4.15888308e-3, abs=1e-9)


def test_dynamic_loss_one_hot_is_zero():
    onehot = np.zeros((5, 8))
    onehot[:, 3] = 1.0
    g = Graph()
    assert float(dynamic_loss(g, g.constant(onehot), 1.0).values) == pytest.approx(0.0, abs=1e-10)


def test_dynamic_loss_two_way_split():
    g = Graph()
    got = float(dynamic_loss(g, g.constant([[0.5, 0.5]]), 1.0).values)
    assert got == pytest.approx(math.log(2.0), abs=1e-12)


def test_dynamic_loss_range():
    rng = np.random.default_rng(4)
    for _ in range(50):
        n = int(rng.integers(2, 32))
        probs = rng.dirichlet(np.full(n, 0.5), size=8)
        g = Graph()
        got = float(dynamic_loss(g, g.constant(probs), 1.0).values)
        assert -1e-12 <= got <= math.log(n) + 1e-12


# -- router z ------------------------------------------------------------------------


def test_router_z_zero_lambda():
    rng = np.random.default_rng(1)
    g = Graph()
    got = float(router_z_loss(g, g.constant(rng.normal(size=(5, 8)) * 10), 0.0).values)
    assert got == 0.0


def test_router_z_zero_logits_closed_form():
    n = 64
    g = Graph()
    got = float(router_z_loss(g, g.constant(np.zeros((7, n))), 1.0).values)
    assert got == pytest.approx(math.log(n) ** 2, abs=1e-10)
    assert got == pytest.approx(17.2963, abs=1e-4)


def test_router_z_single_expert_zero():
    g = Graph()
    assert float(router_z_loss(g, g.constant(np.zeros((3, 1))), 1.0).values) == 0.0


def test_router_z_permutation_invariant():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(6, 10))
    g = Graph()
    base = float(router_z_loss(g, g.constant(z), 1.0).values)
    perm = float(router_z_loss(g, g.constant(z[:, rng.permutation(10)]), 1.0).values)
    assert perm == pytest.approx(base, rel=1e-14)


# -- composite ------------------------------------------------------------------------


def _composite_inputs(weights):
    rng = np.random.default_rng(3)
    m, n, v, layers = 10, 4, 12, 2
    g = Graph()
    logits = g.constant(rng.normal(size=(m, v)))
    targets = rng.integers(0, v, size=m)
    decisions, probs, raw = [], [], []
    for _ in range(layers):
        z = rng.normal(size=(m, n))
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p = p / p.sum(axis=1, keepdims=True)
        decisions.append(select_top_p_batch(p, 0.6))
        probs.append(g.constant(p))
        raw.append(g.constant(z))
    return g, logits, targets, decisions, probs, raw


def test_total_loss_breakdown_sums_exactly():
    weights = LossWeights(lm_z=1e-4, lb=1e-4, dynamic=1e-3, router_z=1e-3)
    g, logits, targets, decisions, probs, raw = _composite_inputs(weights)
    total_t, br = total_loss(g, logits, targets, decisions, probs, raw, weights)
    assert br.total == pytest.approx(float(total_t.values), abs=0.0)
    assert br.total == pytest.approx(br.ce + br.lm_z + br.lb + br.dynamic + br.router_z, abs=1e-12)


def test_total_loss_reduces_to_ce_when_all_lambdas_zero():
    weights = LossWeights(lm_z=0.0, lb=0.0, dynamic=0.0, router_z=0.0)
    g, logits, targets, decisions, probs, raw = _composite_inputs(weights)
    total_t, br = total_loss(g, logits, targets, decisions, probs, raw, weights)
    assert br.total == pytest.approx(br.ce, abs=1e-15)
    assert br.lm_z == br.lb == br.dynamic == br.router_z == 0.0


def test_loss_weight_validation():
    with pytest.raises(ArgumentError):
        LossWeights(lb=-1e-4)
    defaults = LossWeights()
    assert (defaults.lm_z, defaults.lb, defaults.dynamic, defaults.router_z) == \
        (1e-4, 1e-4, 1e-3, 0.0)


# -- gradients -------------------------------------------------------------------------


def test_loss_gradients_against_finite_differences():
    rng = np.random.default_rng(8)
    m, n, v = 6, 4, 8
    targets = rng.integers(0, v, size=m)
    mask_probs = rng.dirichlet(np.ones(n), size=m)
    decision = select_top_p_batch(mask_probs, 0.6)

    def build_lm(g, ts):
        return lm_loss(g, ts[0], targets, 1e-2)

    assert grad_check(build_lm, [rng.normal(size=(m, v))], h=1e-5) < 1e-4

    def build_lb(g, ts):
        return load_balance_loss(g, decision, g.softmax_rows(ts[0]), 0.5)

    assert grad_check(build_lb, [rng.normal(size=(m, n))], h=1e-5) < 1e-4

    def build_dyn(g, ts):
        return dynamic_loss(g, g.softmax_rows(ts[0]), 0.5)

    assert grad_check(build_dyn, [rng.normal(size=(m, n))], h=1e-5) < 1e-4

    def build_rz(g, ts):
        return router_z_loss(g, ts[0], 0.5)

    assert grad_check(build_rz, [rng.normal(size=(m, n))], h=1e-5) < 1e-4
