"""The four-term training objective.

Components, each scaled by its own nonnegative coefficient:

  * language-modeling cross-entropy plus a squared log-partition penalty on
    the output logits (keeps them from drifting upward);
  * load balance: N * sum_i f_i * Q_i, where f_i is the fraction of tokens
    dispatched to expert i (a constant in backward) and Q_i the mean
    probability mass it receives (differentiable);
  * dynamic: the mean entropy of the routing distribution, so minimizing it
    sharpens routing;
  * router-z: squared log-sum-exp of the raw router logits, penalizing
    their magnitude.

Auxiliary terms are computed per expert layer and arithmetic-averaged over
layers, keeping coefficients independent of depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Tensor
from .errors import ArgumentError, ShapeError
from .routing import RoutingDecision

ENTROPY_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lm_z: float = 1e-4
    lb: float = 1e-4
    dynamic: float = 1e-3
    router_z: float = 0.0

    def __post_init__(self):
        for name, v in (("lm_z", self.lm_z), ("lb", self.lb),
                        ("dynamic", self.dynamic), ("router_z", self.router_z)):
            if not np.isfinite(v) or v < 0.0:
                raise ArgumentError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    ce: float
    lm_z: float
    lb: float
    dynamic: float
    router_z: float
    total: float


def _lm_terms(g: Graph, logits: Tensor, targets: np.ndarray) -> tuple[Tensor, Tensor]:
    """(mean cross-entropy, mean squared log-partition) of next-token logits."""
    m = logits.shape[0]
    if m < 1:
        raise ShapeError("lm loss: empty logit batch")
    targets = np.asarray(targets, dtype=np.intp)
    if targets.shape != (m,):
        raise ShapeError(f"lm loss: expected {m} targets, got shape {targets.shape}")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ArgumentError("lm loss: target id outside the vocabulary")
    lse = g.log_sum_exp_rows(logits)
    ce = g.mean(g.sub(lse, g.pick_per_row(logits, targets)))
    z = g.mean(g.mul(lse, lse))
    return ce, z


def lm_loss(g: Graph, logits: Tensor, targets: np.ndarray, lambda_z: float) -> Tensor:
    """Mean cross-entropy plus lambda_z * (log sum exp)^2 per token."""
    ce, z = _lm_terms(g, logits, targets)
    return g.add(ce, g.scale(z, lambda_z))


def load_balance_loss(
    g: Graph, decision: RoutingDecision, probs: Tensor, lambda_lb: float
) -> Tensor:
    """lambda * N * sum_i f_i Q_i; gradient flows through Q only."""
    m, n = probs.shape
    if decision.num_tokens != m or decision.num_experts != n:
        raise ArgumentError(
            f"decision batch {decision.num_tokens}x{decision.num_experts} does not "
            f"match probability batch {m}x{n}"
        )
    f = decision.mask.mean(axis=0)  # dispatch fractions, constant
    q = g.scale(g.sum_rows(g.transpose(probs)), 1.0 / m)
    return g.scale(g.sum(g.mul(q, g.constant(f))), lambda_lb * n)


def dynamic_loss(g: Graph, probs: Tensor, lambda_dl: float) -> Tensor:
    """lambda * mean over tokens of the routing-distribution entropy."""
    m = probs.shape[0]
    plogp = g.mul(probs, g.clamped_log(probs, ENTROPY_FLOOR))
    return g.scale(g.sum(plogp), -lambda_dl / m)


def router_z_loss(g: Graph, raw_logits: Tensor, lambda_rz: float) -> Tensor:
    """lambda * mean over tokens of (log sum exp of raw router logits)^2."""
    lse = g.log_sum_exp_rows(raw_logits)
    return g.scale(g.mean(g.mul(lse, lse)), lambda_rz)


def total_loss(
    g: Graph,
    logits: Tensor,
    targets: np.ndarray,
    decisions: list[RoutingDecision],
    probs: list[Tensor],
    raw_logits: list[Tensor],
    weights: LossWeights,
) -> tuple[Tensor, LossBreakdown]:
    """Assemble the composite objective for one step.

    Returns the differentiable scalar and a float breakdown whose components
    sum to the total exactly (same accumulation order).
    """
    if not (len(decisions) == len(probs) == len(raw_logits)) or not decisions:
        raise ArgumentError("per-layer loss inputs must be non-empty and aligned")
    n_layers = len(decisions)

    ce_t, z_t = _lm_terms(g, logits, targets)
    lmz_t = g.scale(z_t, weights.lm_z)

    def layer_mean(parts: list[Tensor]) -> Tensor:
        acc = parts[0]
        for p in parts[1:]:
            acc = g.add(acc, p)
        return g.scale(acc, 1.0 / n_layers)

    lb_t = layer_mean([load_balance_loss(g, d, p, weights.lb) for d, p in zip(decisions, probs)])
    dyn_t = layer_mean([dynamic_loss(g, p, weights.dynamic) for p in probs])
    if weights.router_z > 0.0:
        rz_t = layer_mean([router_z_loss(g, z, weights.router_z) for z in raw_logits])
    else:
        rz_t = g.constant(0.0)

    total = g.add(g.add(g.add(g.add(ce_t, lmz_t), lb_t), dyn_t), rz_t)
    breakdown = LossBreakdown(
        ce=float(ce_t.values),
        lm_z=float(lmz_t.values),
        lb=float(lb_t.values),
        dynamic=float(dyn_t.values),
        router_z=float(rz_t.values),
        total=float(total.values),
    )
    return total, breakdown
