"""Built-in verification suites behind `moelab selftest`.

Each group checks the library against an independent oracle: brute-force
prefix enumeration for nucleus selection, closed-loop plant simulation for
the threshold controller, central finite differences for gradients, and
hand-derived closed forms for the loss terms. The `fault` hook exists so
the harness itself can be shown to catch a seeded defect (it flips the
oracle's tie-break order, which must make the selection group fail).
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Graph, grad_check
from .control import PIControllerState, piecewise_linear_plant, shifted_plant, simulate_plant
from .losses import dynamic_loss, load_balance_loss, router_z_loss
from .routing import select_top_k_batch, select_top_p, select_top_p_batch

Result = tuple[str, bool, str]


def brute_force_top_p(probs: np.ndarray, p: float, flip_ties: bool = False):
    """Enumerate every prefix length and keep the smallest with mass >= p."""
    n = probs.size
    key = (lambda i: (-probs[i], -i)) if flip_ties else (lambda i: (-probs[i], i))
    order = sorted(range(n), key=key)
    for k in range(1, n + 1):
        mass = sum(probs[i] for i in order[:k])
        if mass >= p or k == n:
            chosen = order[:k]
            weights = np.zeros(n)
            weights[chosen] = probs[chosen] / mass
            return k, chosen, weights


def _random_rows(rng: np.random.Generator, count: int):
    """Random probability rows of width <= 16, with some exact-tie rows mixed in."""
    rows = []
    for i in range(count):
        n = int(rng.integers(2, 17))
        if i % 10 == 0:
            # uniform rows exercise the tie-break rule
            row = np.full(n, 1.0 / n)
        elif i % 10 == 5:
            row = np.repeat(rng.dirichlet(np.ones(max(2, n // 2))), 2)[:n]
            row = row / row.sum()
        else:
            row = rng.dirichlet(np.full(n, rng.uniform(0.2, 3.0)))
        rows.append(row)
    return rows


def check_selection_oracle(fault: str | None = None) -> Result:
    rng = np.random.default_rng(20_240_101)
    for case, row in enumerate(_random_rows(rng, 1000)):
        p = float(rng.uniform(0.01, 0.99))
        got = select_top_p(row, p)
        k, chosen, weights = brute_force_top_p(row, p, flip_ties=(fault == "tiebreak"))
        if got.counts[0] != k or list(got.selected[0]) != chosen \
                or np.max(np.abs(got.weights[0] - weights)) > 1e-12:
            return ("selection oracle", False,
                    f"case {case}: row={row.tolist()} p={p} "
                    f"got k={got.counts[0]} set={list(got.selected[0])}, "
                    f"oracle k={k} set={chosen}")
    return ("selection oracle", True, "1000 rows matched brute-force enumeration")


def check_monotonicity() -> Result:
    rng = np.random.default_rng(7)
    for case in range(1000):
        n = int(rng.integers(2, 17))
        row = rng.dirichlet(np.full(n, rng.uniform(0.2, 3.0)))[None, :]
        p1, p2 = sorted(rng.uniform(0.01, 0.99, size=2))
        k1 = select_top_p_batch(row, float(p1)).counts[0]
        k2 = select_top_p_batch(row, float(p2)).counts[0]
        if k1 > k2:
            return ("nucleus monotonicity", False,
                    f"case {case}: k({p1})={k1} > k({p2})={k2} on {row.tolist()}")
    return ("nucleus monotonicity", True, "1000 threshold pairs")


def check_controller() -> Result:
    n = 16
    plant = piecewise_linear_plant([0.0, 0.3, 0.7, 1.0], [0.5, 5.0, 10.0, 15.5])
    for target in (2, 4, 8):
        state = PIControllerState(p0=0.25, k_pro=0.1, k_int=0.1, target=target, n_experts=n)
        traj = simulate_plant(state, plant, steps=200)
        if abs(traj.activations[-1] - target) > 0.1:
            return ("controller convergence", False,
                    f"target {target}: final activation {traj.activations[-1]:.3f}")
        disturbed = shifted_plant(plant, -1.5, from_step=0)
        traj2 = simulate_plant(state, disturbed, steps=200)
        if abs(traj2.activations[-1] - target) > 0.1:
            return ("controller convergence", False,
                    f"target {target}: no re-convergence after disturbance "
                    f"({traj2.activations[-1]:.3f})")
    return ("controller convergence", True, "targets 2/4/8 with step disturbance")


def check_gradients() -> Result:
    rng = np.random.default_rng(11)
    cases = [
        ("matmul",
         [rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))],
         lambda g, ts: g.sum(g.mul(g.matmul(ts[0], ts[1]), ts[2]))),
        ("softmax",
         [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))],
         lambda g, ts: g.sum(g.mul(g.softmax_rows(ts[0]), ts[1]))),
        ("standardize",
         [rng.normal(size=(3, 4), scale=2.0), rng.normal(size=(3, 4))],
         lambda g, ts: g.sum(g.mul(g.standardize_rows(ts[0]), ts[1]))),
        ("logsumexp",
         [rng.normal(size=(3, 4)), rng.normal(size=(3,))],
         lambda g, ts: g.sum(g.mul(g.log_sum_exp_rows(ts[0]), ts[1]))),
        ("silu",
         [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))],
         lambda g, ts: g.sum(g.mul(g.silu(ts[0]), ts[1]))),
    ]
    for name, arrays, build in cases:
        err = grad_check(build, arrays, h=1e-5)
        if err >= 1e-4:
            return ("gradient checks", False, f"{name}: relative error {err:.2e}")
    return ("gradient checks", True, "core primitives under 1e-4")


def check_loss_closed_forms() -> Result:
    n, m, k = 64, 32, 8
    lam = 1e-4

    g = Graph()
    probs = g.constant(np.full((m, n), 1.0 / n))
    decision = select_top_k_batch(np.full((m, n), 1.0 / n), k)
    lb = float(load_balance_loss(g, decision, probs, lam).values)
    if abs(lb - lam * k) > 1e-10:
        return ("loss closed forms", False, f"uniform load balance {lb!r} != {lam * k!r}")

    dyn = float(dynamic_loss(g, probs, 1e-3).values)
    if abs(dyn - 1e-3 * math.log(n)) > 1e-10:
        return ("loss closed forms", False, f"uniform entropy {dyn!r} != {1e-3 * math.log(n)!r}")

    rz = float(router_z_loss(g, g.constant(np.zeros((m, n))), 1.0).values)
    if abs(rz - math.log(n) ** 2) > 1e-10:
        return ("loss closed forms", False, f"zero-logit router-z {rz!r} != {math.log(n) ** 2!r}")

    return ("loss closed forms", True, "uniform/collapse/zero-logit identities")


def run_groups(fault: str | None = None) -> list[Result]:
    return [
        check_selection_oracle(fault=fault),
        check_monotonicity(),
        check_controller(),
        check_gradients(),
        check_loss_closed_forms(),
    ]
