"""moelab: a desk-scale laboratory for sparsity-controlled expert routing.

Train toy mixture-of-experts language models under three routing rules
(fixed top-k, fixed-threshold nucleus, and feedback-controlled nucleus with
per-layer routing normalization), on a from-scratch float64 reverse-mode
autodiff engine, with deterministic CSV telemetry.
"""

from .autodiff import Graph, Tensor, grad_check
from .control import PIControllerState, pi_update, simulate_plant
from .errors import (
    ArgumentError,
    ConfigError,
    ControllerError,
    GradCheckError,
    InputError,
    MoeLabError,
    ShapeError,
    TrainingAborted,
)
from .losses import LossBreakdown, LossWeights, total_loss
from .model import MoEModel, ToyModelConfig, load_checkpoint, moe_forward, save_checkpoint
from .routing import (
    RoutingDecision,
    RoutingStrategy,
    compute_probabilities,
    count_activated,
    select_top_k,
    select_top_k_batch,
    select_top_p,
    select_top_p_batch,
)
from .telemetry import LayerRecord, StepRecord, TelemetrySink
from .trainer import TrainConfig, adamw_step, evaluate, lr_schedule, make_corpus, train

__version__ = "0.1.0"

__all__ = [
    "ArgumentError", "ConfigError", "ControllerError", "GradCheckError",
    "Graph", "InputError", "LayerRecord", "LossBreakdown", "LossWeights",
    "MoEModel", "MoeLabError", "PIControllerState", "RoutingDecision",
    "RoutingStrategy", "ShapeError", "StepRecord", "TelemetrySink", "Tensor",
    "ToyModelConfig", "TrainConfig", "TrainingAborted", "adamw_step",
    "compute_probabilities", "count_activated", "evaluate", "grad_check",
    "load_checkpoint", "lr_schedule", "make_corpus", "moe_forward",
    "pi_update", "save_checkpoint", "select_top_k", "select_top_k_batch",
    "select_top_p", "select_top_p_batch", "simulate_plant", "total_loss",
    "train",
]
