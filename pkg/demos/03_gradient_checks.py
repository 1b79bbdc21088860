#!/usr/bin/env python3
"""Verifying the autodiff engine against central finite differences.

Every differentiable operation in the lab registers its own
vector-Jacobian product on the tape. grad_check re-evaluates a scalar
function at parameter +/- h and compares the central difference against the
backward pass, returning the worst relative error. Quadratics should agree
to ~1e-10 (central differences are exact on them up to rounding); generic
compositions to better than 1e-4.
"""

import numpy as np

from moelab import Graph, grad_check

rng = np.random.default_rng(0)

print("quadratic in the parameters (central differences are exact here):")
err = grad_check(
    lambda g, ts: g.scale(g.sum(g.mul(ts[0], ts[0])), 0.5),
    [rng.normal(size=(4, 4))],
)
print(f"  0.5*||x||^2          -> max relative error {err:.2e}")

print("softmax/standardize compositions (the routing probability path):")
err = grad_check(
    lambda g, ts: g.sum(g.mul(g.softmax_rows(ts[0]), ts[1])),
    [rng.normal(size=(5, 8)), rng.normal(size=(5, 8))],
)
print(f"  softmax projection   -> max relative error {err:.2e}")

err = grad_check(
    lambda g, ts: g.sum(g.mul(
        g.softmax_rows(g.scale_t(g.standardize_rows(ts[0]), ts[1])), ts[2])),
    [rng.normal(size=(5, 8)) * 2, np.array(1.7), rng.normal(size=(5, 8))],
)
print(f"  temp-scaled routing  -> max relative error {err:.2e}")

print("a cross-entropy head:")
targets = rng.integers(0, 6, size=7)
err = grad_check(
    lambda g, ts: g.mean(g.sub(g.log_sum_exp_rows(ts[0]), g.pick_per_row(ts[0], targets))),
    [rng.normal(size=(7, 6))],
)
print(f"  mean cross-entropy   -> max relative error {err:.2e}")

print()
print("The closed form for the cross-entropy gradient is softmax(z) - onehot:")
g = Graph()
z_val = rng.normal(size=(3, 5))
z = g.parameter(z_val)
g.backward(g.sum(g.sub(g.log_sum_exp_rows(z), g.pick_per_row(z, [0, 2, 4]))))
soft = np.exp(z_val - z_val.max(1, keepdims=True))
soft /= soft.sum(1, keepdims=True)
onehot = np.zeros((3, 5))
onehot[np.arange(3), [0, 2, 4]] = 1
print(f"  max |backward - closed form| = {np.abs(g.grad(z) - (soft - onehot)).max():.2e}")
