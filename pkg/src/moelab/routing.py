"""Expert-selection strategies.

Routing happens in two stages. First the router logits become a probability
distribution over experts (optionally rescaled by a global temperature, or
standardized and sharpened by a learnable per-layer temperature). Then a
selection rule picks a subset per token: either the k most probable experts,
or the smallest descending-probability prefix whose cumulative mass reaches
a threshold p. Selected probabilities are renormalized to sum to one;
everything outside the selection is exactly zero.

Selection is a hard, non-differentiable decision: the mask and cutoff count
are constants in backward, and gradients flow only through the probability
values of selected experts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Tensor
from .errors import ArgumentError, ConfigError

NORMALIZATION_MODES = ("none", "global", "dynamic")
STRATEGY_KINDS = ("topk", "topp", "dtopp")


@dataclass(frozen=True)
class RoutingStrategy:
    """Which experts fire for a token, and how router logits are normalized.

    kind: "topk" (fixed count k), "topp" (fixed threshold p), or "dtopp"
        (controlled threshold starting at p).
    normalization: "none" for a plain softmax, "global" for softmax(tau * z),
        "dynamic" for softmax(theta_l * standardize(z)) with theta_l learnable.
    """

    kind: str
    k: int | None = None
    p: float | None = None
    normalization: str = "none"
    tau: float = 1.0

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy kind {self.kind!r}")
        if self.normalization not in NORMALIZATION_MODES:
            raise ConfigError(f"unknown normalization mode {self.normalization!r}")
        if self.kind == "topk":
            if self.k is None or self.k < 1:
                raise ConfigError(f"topk requires a positive k, got {self.k}")
        else:
            if self.p is None or not (0.0 < self.p < 1.0):
                raise ConfigError(f"{self.kind} requires p strictly inside (0,1), got {self.p}")

    @property
    def uses_threshold(self) -> bool:
        return self.kind in ("topp", "dtopp")


@dataclass
class RoutingDecision:
    """Per-token expert selections for a batch, plus the raw distribution.

    weights[j] holds the renormalized routing weights of token j (zero
    outside the selection), counts[j] the number of selected experts, and
    order[j] the full descending-probability permutation used for the
    prefix. `selected` materializes the per-token index sets lazily.
    """

    probs: np.ndarray       # [M, N] raw probabilities, kept for loss terms
    weights: np.ndarray     # [M, N] renormalized, zero outside selection
    counts: np.ndarray      # [M] selected experts per token
    order: np.ndarray       # [M, N] descending-probability permutation
    _selected: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def num_tokens(self) -> int:
        return self.probs.shape[0]

    @property
    def num_experts(self) -> int:
        return self.probs.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return (self.weights > 0.0).astype(np.float64)

    @property
    def selected(self) -> list[np.ndarray]:
        if self._selected is None:
            self._selected = [self.order[j, : self.counts[j]].copy() for j in range(self.num_tokens)]
        return self._selected


def compute_probabilities(
    graph: Graph,
    logits: Tensor,
    normalization: str = "none",
    theta: Tensor | None = None,
    tau: float = 1.0,
    eps: float = 1e-6,
) -> Tensor:
    """Turn router logits [M,N] into per-token expert probabilities.

    Differentiable w.r.t. the logits, and w.r.t. theta in dynamic mode.
    theta must be present exactly when normalization is "dynamic".
    """
    if normalization not in NORMALIZATION_MODES:
        raise ConfigError(f"unknown normalization mode {normalization!r}")
    if normalization == "dynamic":
        if theta is None:
            raise ConfigError("dynamic normalization requires a temperature tensor")
        return graph.softmax_rows(graph.scale_t(graph.standardize_rows(logits, eps), theta))
    if theta is not None:
        raise ConfigError(f"normalization {normalization!r} does not take a temperature tensor")
    if normalization == "global":
        return graph.softmax_rows(graph.scale(logits, tau))
    return graph.softmax_rows(logits)


def _descending_order(probs: np.ndarray) -> np.ndarray:
    # stable sort of the negated row: descending probability, ties by
    # ascending expert index
    return np.argsort(-probs, axis=1, kind="stable")


def _finalize(probs: np.ndarray, order: np.ndarray, counts: np.ndarray) -> RoutingDecision:
    m, n = probs.shape
    in_prefix = np.arange(n)[None, :] < counts[:, None]
    mask = np.zeros((m, n))
    np.put_along_axis(mask, order, in_prefix.astype(np.float64), axis=1)
    kept = probs * mask
    weights = kept / kept.sum(axis=1, keepdims=True)
    return RoutingDecision(probs=probs, weights=weights, counts=counts, order=order)


def select_top_k_batch(probs: np.ndarray, k: int) -> RoutingDecision:
    """Select the k most probable experts for every row of [M,N]."""
    probs = np.asarray(probs, dtype=np.float64)
    m, n = probs.shape
    if not (1 <= k <= n):
        raise ArgumentError(f"top-k requires 1 <= k <= {n}, got {k}")
    order = _descending_order(probs)
    return _finalize(probs, order, np.full(m, k, dtype=np.intp))


def select_top_p_batch(probs: np.ndarray, p: float) -> RoutingDecision:
    """Select the minimal descending prefix with cumulative mass >= p per row.

    At least one expert is always selected; the boundary is inclusive.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if not (0.0 < p < 1.0):
        raise ArgumentError(f"top-p requires p strictly inside (0,1), got {p}")
    m, n = probs.shape
    order = _descending_order(probs)
    cum = np.cumsum(np.take_along_axis(probs, order, axis=1), axis=1)
    counts = np.minimum((cum < p).sum(axis=1) + 1, n).astype(np.intp)
    return _finalize(probs, order, counts)


def _check_row(probs) -> np.ndarray:
    row = np.asarray(probs, dtype=np.float64)
    if row.ndim != 1 or row.size < 1:
        raise ArgumentError(f"expected a non-empty probability row, got shape {row.shape}")
    if abs(row.sum() - 1.0) > 1e-9:
        raise ArgumentError(f"probability row sums to {row.sum()!r}, not 1")
    return row


def select_top_k(probs, k: int) -> RoutingDecision:
    """Single-row top-k selection (see select_top_k_batch)."""
    return select_top_k_batch(_check_row(probs)[None, :], k)


def select_top_p(probs, p: float) -> RoutingDecision:
    """Single-row nucleus selection (see select_top_p_batch)."""
    return select_top_p_batch(_check_row(probs)[None, :], p)


def count_activated(decision: RoutingDecision) -> tuple[float, float, np.ndarray]:
    """Mean and population std of selected-expert counts across a batch."""
    if decision.num_tokens < 1:
        raise ArgumentError("count_activated: empty batch")
    counts = decision.counts.astype(np.float64)
    return float(counts.mean()), float(counts.std()), counts
