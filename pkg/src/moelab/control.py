"""Discrete PI control of the routing threshold.

The controller treats the batch-averaged number of activated experts as the
process variable and the global probability threshold as the control
variable. Each update appends the normalized sparsity error
e_t = (target - observed) / num_experts to a running sum and recomputes the
threshold from the initial value in absolute form:

    p_next = p0 + k_pro * e_t + k_int * sum(e_1 .. e_t)

clipped to [P_MIN, P_MAX]. There is no anti-windup and no derivative term;
the error sum accumulates without decay and only the output is clipped.

Synthetic plants (monotone threshold -> activation maps) let the closed loop
be verified without training anything.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, ControllerError

P_MIN = 1e-4
P_MAX = 1.0 - 1e-4

# plant signature: (threshold, step) -> mean activated experts
Plant = Callable[[float, int], float]


@dataclass
class PIControllerState:
    """Threshold controller state: gains, target, and the error integral."""

    p0: float
    k_pro: float
    k_int: float
    target: float
    n_experts: int
    p_t: float | None = None
    e_sum: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.p0 < 1.0):
            raise ConfigError(f"initial threshold must lie in (0,1), got {self.p0}")
        if self.k_pro < 0.0 or self.k_int < 0.0:
            raise ConfigError("controller gains must be >= 0")
        if not (0 < self.target <= self.n_experts):
            raise ConfigError(
                f"target {self.target} outside (0, {self.n_experts}]"
            )
        if self.p_t is None:
            self.p_t = self.p0


def pi_update(state: PIControllerState, a_t: float) -> float:
    """Consume one activation measurement and return the next threshold.

    Mutates the state (error sum and current threshold). A non-finite
    measurement raises and leaves the state untouched.
    """
    a_t = float(a_t)
    if not np.isfinite(a_t):
        raise ControllerError(f"non-finite activation measurement: {a_t!r}")
    e_t = (state.target - a_t) / state.n_experts
    state.e_sum += e_t
    raw = state.p0 + state.k_pro * e_t + state.k_int * state.e_sum
    state.p_t = min(max(raw, P_MIN), P_MAX)
    return state.p_t


@dataclass
class PlantTrajectory:
    thresholds: np.ndarray  # p used for each measurement
    activations: np.ndarray
    errors: np.ndarray


def simulate_plant(
    state: PIControllerState,
    plant: Plant,
    steps: int,
    noise_amp: float = 0.0,
    seed: int = 0,
) -> PlantTrajectory:
    """Run the closed loop against a synthetic plant.

    The plant must be nondecreasing in the threshold and must bracket the
    target at step 0, otherwise the loop cannot converge and a ConfigError
    is raised. Noise, when enabled, is bounded uniform in [-amp, amp] and
    fully determined by the seed.
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    lo, hi = plant(P_MIN, 0), plant(P_MAX, 0)
    if not (lo <= state.target <= hi):
        raise ConfigError(
            f"target {state.target} outside plant range [{lo}, {hi}]"
        )
    rng = np.random.default_rng(seed)
    ps = np.empty(steps)
    activations = np.empty(steps)
    errors = np.empty(steps)
    for t in range(steps):
        p_used = state.p_t
        a = plant(p_used, t)
        if noise_amp > 0.0:
            a += rng.uniform(-noise_amp, noise_amp)
        ps[t] = p_used
        activations[t] = a
        pi_update(state, a)
        errors[t] = (state.target - a) / state.n_experts
    return PlantTrajectory(thresholds=ps, activations=activations, errors=errors)


def linear_plant(n_experts: int) -> Plant:
    """a(p) = N * p, the simplest strictly increasing response."""
    return lambda p, _t: n_experts * p


def piecewise_linear_plant(knots_p, knots_a) -> Plant:
    """Strictly increasing piecewise-linear response through the given knots."""
    kp = np.asarray(knots_p, dtype=np.float64)
    ka = np.asarray(knots_a, dtype=np.float64)
    if kp.ndim != 1 or kp.shape != ka.shape or kp.size < 2:
        raise ConfigError("plant needs matching 1-d knot arrays with >= 2 points")
    if np.any(np.diff(kp) <= 0) or np.any(np.diff(ka) <= 0):
        raise ConfigError("plant knots must be strictly increasing")
    return lambda p, _t: float(np.interp(p, kp, ka))


def shifted_plant(base: Plant, shift: float, from_step: int) -> Plant:
    """Apply a step disturbance: add `shift` to the response from a given step."""
    return lambda p, t: base(p, t) + (shift if t >= from_step else 0.0)
