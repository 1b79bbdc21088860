"""Model contracts: expert mixing, selective evaluation, weight tying,
per-layer temperature effects, determinism, and checkpoint round-trips."""

import numpy as np
import pytest

from moelab.autodiff import Graph, grad_check
from moelab.errors import ConfigError, InputError
from moelab.losses import LossWeights, total_loss
from moelab.model import (
    MoEModel,
    MoELayer,
    ToyModelConfig,
    load_checkpoint,
    moe_forward,
    save_checkpoint,
    trunc_normal,
)
from moelab.routing import RoutingStrategy

from _fdutil import model_fd_check, model_loss, selection_margin

TINY = ToyModelConfig(layers=2, hidden=8, expert_dim=6, n_experts=4, vocab=12, seq_len=6)
DT = RoutingStrategy(kind="dtopp", p=0.4, normalization="dynamic")


def tiny_tokens(rng, batch=3, seq=6, vocab=12):
    return rng.integers(0, vocab, size=(batch, seq))


def bind(model, g):
    return {name: g.parameter(buf) for name, buf in model.parameters().items()}


# -- moe_forward ----------------------------------------------------------------


def test_single_expert_passes_through_with_weight_one():
    rng = np.random.default_rng(0)
    layer = MoELayer(rng, 0, hidden=8, expert_dim=6, n_experts=1, dynamic_norm=False)
    strategy = RoutingStrategy(kind="topk", k=1)
    x_val = rng.normal(size=(5, 8))
    g = Graph()
    bound = {"layer0.router_w": g.parameter(layer.router_w)}
    for name in ("w_gate", "w_in", "w_out"):
        bound[f"layer0.expert0.{name}"] = g.parameter(getattr(layer.experts[0], name))
    x = g.constant(x_val)
    y, decision, probs, _ = moe_forward(g, x, layer, strategy, None, bound)
    direct = layer.experts[0].apply(g, x, {n: bound[f"layer0.expert0.{n}"] for n in ("w_gate", "w_in", "w_out")})
    np.testing.assert_allclose(y.values, direct.values, atol=1e-12)
    np.testing.assert_array_equal(decision.weights, np.ones((5, 1)))


def test_identical_experts_with_half_weights_match_single_expert():
    rng = np.random.default_rng(1)
    layer = MoELayer(rng, 0, hidden=8, expert_dim=6, n_experts=2, dynamic_norm=False)
    # make both experts identical and the router perfectly ambivalent
    for name in ("w_gate", "w_in", "w_out"):
        getattr(layer.experts[1], name)[...] = getattr(layer.experts[0], name)
    layer.router_w[...] = 0.0
    strategy = RoutingStrategy(kind="topk", k=2)
    x_val = rng.normal(size=(4, 8))
    g = Graph()
    bound = {"layer0.router_w": g.parameter(layer.router_w)}
    for e in range(2):
        for name in ("w_gate", "w_in", "w_out"):
            bound[f"layer0.expert{e}.{name}"] = g.parameter(getattr(layer.experts[e], name))
    x = g.constant(x_val)
    y, decision, _, _ = moe_forward(g, x, layer, strategy, None, bound)
    direct = layer.experts[0].apply(g, x, {n: bound[f"layer0.expert0.{n}"] for n in ("w_gate", "w_in", "w_out")})
    np.testing.assert_allclose(decision.weights, np.full((4, 2), 0.5), atol=1e-12)
    np.testing.assert_allclose(y.values, direct.values, atol=1e-12)


def test_threshold_strategy_mismatch_rejected():
    rng = np.random.default_rng(2)
    layer = MoELayer(rng, 0, hidden=8, expert_dim=6, n_experts=4, dynamic_norm=False)
    g = Graph()
    bound = {"layer0.router_w": g.parameter(layer.router_w)}
    x = g.constant(rng.normal(size=(2, 8)))
    with pytest.raises(ConfigError):
        moe_forward(g, x, layer, RoutingStrategy(kind="topp", p=0.5, normalization="global"),
                    None, bound)
    with pytest.raises(ConfigError):
        moe_forward(g, x, layer, RoutingStrategy(kind="topk", k=2), 0.5, bound)


# -- selective evaluation ------------------------------------------------------------


def test_unselected_expert_perturbation_leaves_output_unchanged():
    rng = np.random.default_rng(3)
    layer = MoELayer(rng, 0, hidden=8, expert_dim=6, n_experts=4, dynamic_norm=False)
    layer.router_w[:, 3] = -50.0  # with positive inputs, expert 3 never wins a slot
    strategy = RoutingStrategy(kind="topk", k=2)
    x_val = np.abs(rng.normal(size=(5, 8))) + 0.1

    def run():
        g = Graph()
        bound = {"layer0.router_w": g.parameter(layer.router_w)}
        for e in range(4):
            for name in ("w_gate", "w_in", "w_out"):
                bound[f"layer0.expert{e}.{name}"] = g.parameter(getattr(layer.experts[e], name))
        y, decision, _, _ = moe_forward(g, g.constant(x_val), layer, strategy, None, bound)
        return y.values.copy(), decision

    base, decision = run()
    assert decision.mask[:, 3].sum() == 0
    layer.experts[3].w_out += rng.normal(size=layer.experts[3].w_out.shape)
    perturbed, _ = run()
    np.testing.assert_array_equal(perturbed, base)


def test_unselected_expert_gets_zero_gradient():
    rng = np.random.default_rng(4)
    model = MoEModel(TINY, DT, seed=5)
    tokens = tiny_tokens(rng)
    g = Graph()
    res = model.forward(g, tokens, threshold=0.4)
    loss, _ = total_loss(g, res.logits, tokens.reshape(-1), res.decisions,
                         res.probs, res.raw_logits, LossWeights())
    g.backward(loss)
    loads = res.decisions[1].mask.sum(axis=0)
    for e, load in enumerate(loads):
        grad = g.grad(res.params[f"layer1.expert{e}.w_out"])
        if load == 0:
            np.testing.assert_array_equal(grad, np.zeros_like(grad))
        else:
            assert np.abs(grad).max() > 0.0


# -- routing temperature -----------------------------------------------------------


def test_theta_gradient_nonzero_and_passes_finite_differences():
    lam = LossWeights(lm_z=1e-3, lb=1e-2, dynamic=1e-2, router_z=1e-2)
    # scan seeds for an instance whose selection boundaries sit clear of the
    # threshold, so the finite-difference oracle is valid at h=1e-5
    for seed in range(20):
        rng = np.random.default_rng(600 + seed)
        model = MoEModel(TINY, DT, seed=seed)
        tokens = tiny_tokens(rng)
        if selection_margin(model, tokens, 0.4) > 1e-3:
            break
    else:
        pytest.fail("no margin-safe instance found")

    g, res, loss = model_loss(model, tokens, 0.4, lam)
    g.backward(loss)
    theta_grads = [abs(float(g.grad(res.params[f"layer{l}.theta"]))) for l in range(2)]
    assert max(theta_grads) > 0.0

    err = model_fd_check(model, tokens, 0.4, lam, ["layer0.theta", "layer1.theta"])
    assert err < 1e-4


def test_distinct_thetas_give_distinct_layer_activation_means():
    cfg = ToyModelConfig(layers=4, hidden=16, expert_dim=8, n_experts=8, vocab=16, seq_len=8)
    model = MoEModel(cfg, RoutingStrategy(kind="dtopp", p=0.5, normalization="dynamic"), seed=9)
    for layer, theta in zip(model.moe_layers, (0.5, 1.0, 2.0, 4.0)):
        layer.theta[...] = theta
    rng = np.random.default_rng(10)
    tokens = rng.integers(0, 16, size=(6, 8))
    g = Graph()
    res = model.forward(g, tokens, threshold=0.5)
    means = [d.counts.mean() for d in res.decisions]
    assert len(set(np.round(means, 6))) > 1
    # sharper temperature selects fewer experts on average
    assert means[3] < means[0]


# -- lm_forward ------------------------------------------------------------------------


def test_degenerate_single_layer_single_expert_is_finite():
    cfg = ToyModelConfig(layers=1, hidden=8, expert_dim=4, n_experts=1, vocab=10, seq_len=5)
    model = MoEModel(cfg, RoutingStrategy(kind="topk", k=1), seed=1)
    tokens = np.arange(10).reshape(2, 5) % 10
    g = Graph()
    res = model.forward(g, tokens)
    assert res.logits.shape == (10, 10)
    assert np.all(np.isfinite(res.logits.values))


def test_weight_tying_saves_exactly_vocab_times_hidden():
    tied = MoEModel(TINY, DT, seed=0)
    untied_cfg = ToyModelConfig(layers=2, hidden=8, expert_dim=6, n_experts=4,
                                vocab=12, seq_len=6, tie_weights=False)
    untied = MoEModel(untied_cfg, DT, seed=0)
    assert untied.num_parameters() - tied.num_parameters() == 12 * 8


def test_forward_determinism():
    rng = np.random.default_rng(11)
    tokens = tiny_tokens(rng)
    outs = []
    for _ in range(2):
        model = MoEModel(TINY, DT, seed=21)
        g = Graph()
        res = model.forward(g, tokens, threshold=0.4)
        outs.append((res.logits.values.copy(), [d.counts.copy() for d in res.decisions]))
    np.testing.assert_array_equal(outs[0][0], outs[1][0])
    for a, b in zip(outs[0][1], outs[1][1]):
        np.testing.assert_array_equal(a, b)


def test_out_of_vocabulary_rejected():
    model = MoEModel(TINY, DT, seed=0)
    g = Graph()
    with pytest.raises(InputError):
        model.forward(g, np.array([[0, 1, 99]]), threshold=0.4)


def test_topk_k_bounded_by_expert_count():
    with pytest.raises(ConfigError):
        MoEModel(TINY, RoutingStrategy(kind="topk", k=5), seed=0)


# -- init and checkpoint -------------------------------------------------------------


def test_trunc_normal_respects_cutoff():
    rng = np.random.default_rng(12)
    sample = trunc_normal(rng, (20000,), std=0.02, cutoff=3.0)
    assert np.abs(sample).max() <= 0.06 + 1e-12
    assert abs(sample.std() - 0.02) < 2e-3


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = MoEModel(TINY, DT, seed=33)
    path = tmp_path / "model.moelab"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    assert loaded.strategy == model.strategy
    for (name, a), (name2, b) in zip(model.parameters().items(), loaded.parameters().items()):
        assert name == name2
        np.testing.assert_array_equal(a, b)
    # and the two models produce identical logits
    tokens = np.arange(12).reshape(2, 6)
    ga, gb = Graph(), Graph()
    np.testing.assert_array_equal(
        model.forward(ga, tokens, threshold=0.4).logits.values,
        loaded.forward(gb, tokens, threshold=0.4).logits.values,
    )


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bogus.moelab"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
    with pytest.raises(InputError):
        load_checkpoint(path)
