"""Toy causal language model with a routed expert layer in every block.

The backbone is deliberately small: token + position embeddings, then L
blocks of [pre-normalized single-head causal self-attention, pre-normalized
mixture-of-experts feedforward], then a pre-normalized output head that can
share its matrix with the token embedding. Experts are two-matrix gated
feedforwards (silu gate). Per token, only the experts chosen by the routing
strategy are evaluated; their outputs are mixed with the renormalized
routing weights.

Checkpoints are a single self-describing binary file: an 8-byte magic that
carries the format version, a length-prefixed JSON header (config, strategy,
parameter names and shapes), then the raw little-endian float64 arrays.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Graph, Tensor
from .errors import ConfigError, InputError
from .routing import (
    RoutingDecision,
    RoutingStrategy,
    compute_probabilities,
    select_top_k_batch,
    select_top_p_batch,
)

CHECKPOINT_MAGIC = b"MOELAB01"


@dataclass(frozen=True)
class ToyModelConfig:
    layers: int = 4
    hidden: int = 64
    expert_dim: int = 32
    n_experts: int = 16
    vocab: int = 64
    seq_len: int = 32
    tie_weights: bool = True

    def __post_init__(self):
        if self.layers < 1 or self.n_experts < 1 or self.vocab < 2:
            raise ConfigError(
                f"need layers >= 1, experts >= 1, vocab >= 2; got "
                f"{self.layers}/{self.n_experts}/{self.vocab}"
            )
        if self.hidden < 1 or self.expert_dim < 1 or self.seq_len < 1:
            raise ConfigError("hidden, expert_dim and seq_len must be positive")


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, cutoff: float = 3.0) -> np.ndarray:
    """Normal(0, std) with resampling outside +/- cutoff standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > cutoff
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > cutoff
    return out * std


class ExpertFFN:
    """Gated two-matrix feedforward: (silu(x W_gate) * (x W_in)) W_out."""

    def __init__(self, rng: np.random.Generator, hidden: int, expert_dim: int):
        self.w_gate = trunc_normal(rng, (hidden, expert_dim))
        self.w_in = trunc_normal(rng, (hidden, expert_dim))
        self.w_out = trunc_normal(rng, (expert_dim, hidden))

    def apply(self, g: Graph, x: Tensor, p) -> Tensor:
        h = g.mul(g.silu(g.matmul(x, p["w_gate"])), g.matmul(x, p["w_in"]))
        return g.matmul(h, p["w_out"])


class MoELayer:
    """Router weights, N experts, and (in dynamic mode) a learnable temperature."""

    def __init__(self, rng: np.random.Generator, index: int, hidden: int,
                 expert_dim: int, n_experts: int, dynamic_norm: bool):
        self.index = index
        self.router_w = trunc_normal(rng, (hidden, n_experts))
        self.experts = [ExpertFFN(rng, hidden, expert_dim) for _ in range(n_experts)]
        # temperature starts at 1.0 (identity); trainable iff dynamic normalization
        self.theta = np.array(1.0) if dynamic_norm else None


def moe_forward(
    g: Graph,
    x: Tensor,
    layer: MoELayer,
    strategy: RoutingStrategy,
    threshold: float | None,
    bound: dict[str, Tensor],
) -> tuple[Tensor, RoutingDecision, Tensor, Tensor]:
    """Route tokens [M,hidden] through the layer's experts.

    Returns the mixed output, the selection decision, the probability tensor
    and the raw router logits (both needed by the auxiliary losses). Only
    selected experts are evaluated, and gradients reach an expert only
    through the tokens routed to it.
    """
    if strategy.uses_threshold:
        if threshold is None:
            raise ConfigError(f"strategy {strategy.kind!r} needs a threshold")
    elif threshold is not None:
        raise ConfigError(f"strategy {strategy.kind!r} does not take a threshold")

    prefix = f"layer{layer.index}."
    raw_logits = g.matmul(x, bound[prefix + "router_w"])
    theta_t = bound.get(prefix + "theta")
    probs_t = compute_probabilities(
        g, raw_logits, strategy.normalization, theta=theta_t, tau=strategy.tau
    )

    if strategy.kind == "topk":
        decision = select_top_k_batch(probs_t.values, strategy.k)
    else:
        decision = select_top_p_batch(probs_t.values, threshold)

    # renormalized weights, differentiable through the selected probabilities;
    # the selection mask is a constant
    masked = g.mul(probs_t, g.constant(decision.mask))
    r = g.div_rows(masked, g.sum_rows(masked))

    m = x.shape[0]
    y: Tensor | None = None
    for e_idx, expert in enumerate(layer.experts):
        rows = np.nonzero(decision.weights[:, e_idx] > 0.0)[0]
        if rows.size == 0:
            continue
        xe = g.gather_rows(x, rows, unique=True)
        oe = expert.apply(g, xe, {
            name: bound[f"{prefix}expert{e_idx}.{name}"] for name in ("w_gate", "w_in", "w_out")
        })
        contrib = g.scatter_rows(g.mul_rows(oe, g.take_rows_col(r, rows, e_idx)), rows, m)
        y = contrib if y is None else g.add(y, contrib)
    assert y is not None  # every token selects at least one expert
    return y, decision, probs_t, raw_logits


@dataclass
class ForwardResult:
    logits: Tensor
    decisions: list[RoutingDecision]
    probs: list[Tensor]
    raw_logits: list[Tensor]
    params: dict[str, Tensor]


class MoEModel:
    """The full toy LM; owns persistent parameter buffers."""

    def __init__(self, config: ToyModelConfig, strategy: RoutingStrategy, seed: int = 0):
        if strategy.kind == "topk" and strategy.k > config.n_experts:
            raise ConfigError(f"k={strategy.k} exceeds {config.n_experts} experts")
        self.config = config
        self.strategy = strategy
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        c = config
        self.embedding = trunc_normal(rng, (c.vocab, c.hidden))
        self.positions = trunc_normal(rng, (c.seq_len, c.hidden))
        self.attn = [
            {name: trunc_normal(rng, (c.hidden, c.hidden)) for name in ("wq", "wk", "wv", "wo")}
            for _ in range(c.layers)
        ]
        dynamic = strategy.normalization == "dynamic"
        self.moe_layers = [
            MoELayer(rng, l, c.hidden, c.expert_dim, c.n_experts, dynamic)
            for l in range(c.layers)
        ]
        self.head = None if c.tie_weights else trunc_normal(rng, (c.hidden, c.vocab))
        self._mask_cache: dict[tuple[int, int], np.ndarray] = {}

    # -- parameters ------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        """Named persistent buffers, in a stable order."""
        params: dict[str, np.ndarray] = {"embedding": self.embedding, "positions": self.positions}
        for l, (attn, moe) in enumerate(zip(self.attn, self.moe_layers)):
            for name, w in attn.items():
                params[f"layer{l}.{name}"] = w
            params[f"layer{l}.router_w"] = moe.router_w
            if moe.theta is not None:
                params[f"layer{l}.theta"] = moe.theta
            for e, expert in enumerate(moe.experts):
                params[f"layer{l}.expert{e}.w_gate"] = expert.w_gate
                params[f"layer{l}.expert{e}.w_in"] = expert.w_in
                params[f"layer{l}.expert{e}.w_out"] = expert.w_out
        if self.head is not None:
            params["head"] = self.head
        return params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def _causal_mask(self, batch: int, seq: int) -> np.ndarray:
        key = (batch, seq)
        if key not in self._mask_cache:
            mask = np.triu(np.full((seq, seq), -1e9), k=1)
            self._mask_cache[key] = np.broadcast_to(mask, (batch, seq, seq)).copy()
        return self._mask_cache[key]

    # -- forward -----------------------------------------------------------

    def forward(self, g: Graph, tokens: np.ndarray, threshold: float | None = None) -> ForwardResult:
        """Next-token logits for an integer batch [B,S], plus routing records."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise InputError(f"expected a [batch, seq] token array, got shape {tokens.shape}")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab:
            raise InputError(
                f"token ids must lie in [0, {self.config.vocab}), got "
                f"[{tokens.min()}, {tokens.max()}]"
            )
        b, s = tokens.shape
        if s > self.config.seq_len:
            raise InputError(f"sequence length {s} exceeds maximum {self.config.seq_len}")
        c = self.config
        bound = {name: g.parameter(buf) for name, buf in self.parameters().items()}

        flat = tokens.reshape(-1)
        pos_ids = np.tile(np.arange(s), b)
        x = g.add(g.embedding(bound["embedding"], flat), g.embedding(bound["positions"], pos_ids))

        decisions, probs_list, raw_list = [], [], []
        scale = 1.0 / np.sqrt(c.hidden)
        mask3 = g.constant(self._causal_mask(b, s))
        for l in range(c.layers):
            # single-head causal self-attention with pre-normalization
            a_in = g.standardize_rows(x)
            q = g.reshape(g.matmul(a_in, bound[f"layer{l}.wq"]), (b, s, c.hidden))
            k = g.reshape(g.matmul(a_in, bound[f"layer{l}.wk"]), (b, s, c.hidden))
            v = g.reshape(g.matmul(a_in, bound[f"layer{l}.wv"]), (b, s, c.hidden))
            scores = g.add(g.scale(g.bmm(q, g.swap_last2(k)), scale), mask3)
            attn = g.reshape(
                g.softmax_rows(g.reshape(scores, (b * s, s))), (b, s, s)
            )
            ctx = g.reshape(g.bmm(attn, v), (b * s, c.hidden))
            x = g.add(x, g.matmul(ctx, bound[f"layer{l}.wo"]))

            # routed expert feedforward with pre-normalization
            y, decision, probs_t, raw_t = moe_forward(
                g, g.standardize_rows(x), self.moe_layers[l], self.strategy, threshold, bound
            )
            x = g.add(x, y)
            decisions.append(decision)
            probs_list.append(probs_t)
            raw_list.append(raw_t)

        final = g.standardize_rows(x)
        if self.head is not None:
            logits = g.matmul(final, bound["head"])
        else:
            logits = g.matmul(final, g.transpose(bound["embedding"]))
        return ForwardResult(logits, decisions, probs_list, raw_list, bound)


# -- checkpoint io --------------------------------------------------------


def save_checkpoint(model: MoEModel, path) -> None:
    params = model.parameters()
    header = {
        "format_version": 1,
        "config": asdict(model.config),
        "strategy": asdict(model.strategy),
        "params": [{"name": n, "shape": list(p.shape)} for n, p in params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in params.values():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path) -> MoEModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise InputError(f"not a model checkpoint (bad magic {magic!r}): {path}")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        if header.get("format_version") != 1:
            raise InputError(f"unsupported checkpoint version: {header.get('format_version')}")
        config = ToyModelConfig(**header["config"])
        strategy = RoutingStrategy(**header["strategy"])
        model = MoEModel(config, strategy, seed=0)
        params = model.parameters()
        saved = [(entry["name"], tuple(entry["shape"])) for entry in header["params"]]
        if [(n, tuple(p.shape)) for n, p in params.items()] != saved:
            raise InputError("checkpoint parameter table does not match the model layout")
        for name, shape in saved:
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(n_items * 8), dtype="<f8").reshape(shape)
            params[name][...] = data
    return model
