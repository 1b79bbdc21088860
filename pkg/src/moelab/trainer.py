"""End-to-end training loop.

One step: take the next contiguous token windows, run the model forward
under the current strategy (nucleus strategies read the global threshold),
pool the activated-expert count over layers and tokens, let the threshold
controller consume it, assemble the composite loss, backpropagate, clip the
global gradient norm, and apply the AdamW update under a warmup+cosine
schedule. Validation runs at a fixed interval with parameters and threshold
frozen. Everything downstream of (config, seed) is deterministic.

A non-finite loss or gradient aborts the run loudly; steps are never
silently skipped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph
from .control import PIControllerState, pi_update
from .errors import ArgumentError, ConfigError, TrainingAborted
from .losses import LossBreakdown, LossWeights, total_loss
from .model import MoEModel, ToyModelConfig, save_checkpoint
from .routing import RoutingStrategy
from .telemetry import LayerRecord, StepRecord, TelemetrySink

# -- corpora ----------------------------------------------------------------

# Public-domain text (Shakespeare, Sonnets I-VIII) for byte-level training.
BUNDLED_TEXT = """\
From fairest creatures we desire increase,
That thereby beauty's rose might never die,
But as the riper should by time decease,
His tender heir might bear his memory:
But thou contracted to thine own bright eyes,
Feed'st thy light's flame with self-substantial fuel,
Making a famine where abundance lies,
Thy self thy foe, to thy sweet self too cruel:
Thou that art now the world's fresh ornament,
And only herald to the gaudy spring,
Within thine own bud buriest thy content,
And, tender churl, mak'st waste in niggarding:
Pity the world, or else this glutton be,
To eat the world's due, by the grave and thee.
When forty winters shall besiege thy brow,
And dig deep trenches in thy beauty's field,
Thy youth's proud livery so gazed on now,
Will be a totter'd weed of small worth held:
Then being asked, where all thy beauty lies,
Where all the treasure of thy lusty days;
To say, within thine own deep sunken eyes,
Were an all-eating shame, and thriftless praise.
How much more praise deserv'd thy beauty's use,
If thou couldst answer 'This fair child of mine
Shall sum my count, and make my old excuse,'
Proving his beauty by succession thine!
This were to be new made when thou art old,
And see thy blood warm when thou feel'st it cold.
Look in thy glass and tell the face thou viewest
Now is the time that face should form another;
Whose fresh repair if now thou not renewest,
Thou dost beguile the world, unbless some mother.
For where is she so fair whose unear'd womb
Disdains the tillage of thy husbandry?
Or who is he so fond will be the tomb
Of his self-love, to stop posterity?
Thou art thy mother's glass and she in thee
Calls back the lovely April of her prime;
So thou through windows of thine age shalt see,
Despite of wrinkles, this thy golden time.
But if thou live, remember'd not to be,
Die single and thine image dies with thee.
"""

# synthetic grammar vocabulary: a terminator, two agreement markers, then
# word banks; verbs and nouns must agree with the sentence marker
_END = 0
_MARKERS = (1, 2)
_DET_LO, _DET_N = 3, 4
_ADJ_LO, _ADJ_N = 7, 8
_NOUN_LO, _NOUN_N = 15, 8   # bank for marker 1; marker 2 bank starts 8 higher
_VERB_LO, _VERB_N = 31, 8
GRAMMAR_VOCAB = 47


def _grammar_sentence(rng: np.random.Generator) -> list[int]:
    gender = int(rng.integers(0, 2))
    out = [_MARKERS[gender]]

    def noun_phrase():
        out.append(_DET_LO + int(rng.integers(_DET_N)))
        for _ in range(int(rng.integers(0, 3))):
            out.append(_ADJ_LO + int(rng.integers(_ADJ_N)))
        out.append(_NOUN_LO + gender * _NOUN_N + int(rng.integers(_NOUN_N)))

    noun_phrase()
    out.append(_VERB_LO + gender * _VERB_N + int(rng.integers(_VERB_N)))
    noun_phrase()
    out.append(_END)
    return out


def make_corpus(kind: str, size: int, seed: int) -> tuple[np.ndarray, int]:
    """Deterministic token stream of at least `size` tokens, plus vocab size.

    "synthetic-grammar" emits sentences from a small agreement grammar;
    "bundled-text" repeats a byte-level public-domain snippet.
    """
    if size < 1:
        raise ArgumentError(f"corpus size must be >= 1, got {size}")
    if kind == "synthetic-grammar":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]))
        tokens: list[int] = []
        while len(tokens) < size:
            tokens.extend(_grammar_sentence(rng))
        return np.asarray(tokens[:size], dtype=np.int64), GRAMMAR_VOCAB
    if kind == "bundled-text":
        raw = np.frombuffer(BUNDLED_TEXT.encode("utf-8"), dtype=np.uint8).astype(np.int64)
        reps = -(-size // raw.size)
        return np.tile(raw, reps)[:size], 256
    raise ArgumentError(f"unknown corpus kind {kind!r}")


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.95,
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """Bias-corrected AdamW update, in place.

    Decay is decoupled (theta -= lr * wd * theta) and applied only to
    matrices (ndim >= 2), so scalar temperatures are not dragged to zero.
    Non-finite gradients abort the run.
    """
    if lr < 0.0:
        raise ArgumentError(f"learning rate must be >= 0, got {lr}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay > 0.0 and p.ndim >= 2:
            p -= lr * weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params


def lr_schedule(step: int, warmup: int, total: int, peak: float, floor: float) -> float:
    """Linear warmup to `peak`, then cosine decay to `floor` at `total`."""
    if not (0 <= step <= total):
        raise ArgumentError(f"step {step} outside [0, {total}]")
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if total == warmup:
        return peak
    t = (step - warmup) / (total - warmup)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * t))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so the global norm is at most `max_norm`; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0.0 and total > max_norm:
        factor = max_norm / total
        for name in grads:
            grads[name] = grads[name] * factor
    return total


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    model: ToyModelConfig = field(default_factory=ToyModelConfig)
    strategy: RoutingStrategy = field(default_factory=lambda: RoutingStrategy(kind="topk", k=4))
    weights: LossWeights = field(default_factory=LossWeights)
    target: int = 4              # controller target (nucleus) / expected count (top-k)
    k_pro: float = 0.1
    k_int: float = 0.1
    pi_during_warmup: bool = True
    steps: int = 2000
    batch_tokens: int = 1024
    peak_lr: float = 3e-3
    min_lr: float = 3e-5
    warmup: int = 100
    weight_decay: float = 3.3e-2
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    data_kind: str = "synthetic-grammar"
    data_size: int = 200_000
    eval_interval: int = 100
    eval_batches: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.warmup > self.steps:
            raise ConfigError(f"warmup {self.warmup} exceeds total steps {self.steps}")
        if self.min_lr > self.peak_lr:
            raise ConfigError(f"min lr {self.min_lr} exceeds peak lr {self.peak_lr}")
        if self.steps < 1 or self.batch_tokens < self.model.seq_len:
            raise ConfigError("need steps >= 1 and at least one sequence per batch")
        if self.strategy.kind == "topk" and self.strategy.k != self.target:
            raise ConfigError(
                f"top-k count {self.strategy.k} and target {self.target} disagree"
            )
        if not (0 < self.target <= self.model.n_experts):
            raise ConfigError(f"target {self.target} outside (0, {self.model.n_experts}]")


# -- batching -----------------------------------------------------------------


class _Windows:
    """Contiguous non-overlapping [B,S] next-token windows over a split."""

    def __init__(self, tokens: np.ndarray, seq_len: int, batch_seqs: int):
        self.tokens = tokens
        self.seq_len = seq_len
        self.batch_seqs = batch_seqs
        self.n_windows = (tokens.size - 1) // seq_len
        if self.n_windows < 1:
            raise ArgumentError("split too small for even one window")
        self.cursor = 0

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for _ in range(self.batch_seqs):
            start = self.cursor * self.seq_len
            xs.append(self.tokens[start:start + self.seq_len])
            ys.append(self.tokens[start + 1:start + self.seq_len + 1])
            self.cursor = (self.cursor + 1) % self.n_windows
        return np.stack(xs), np.stack(ys)


# -- activation accounting ------------------------------------------------------


def _activation_stats(decisions) -> tuple[float, float, list[float]]:
    """Pooled mean/std over all (layer, token) counts, plus per-layer means."""
    all_counts = np.concatenate([d.counts for d in decisions]).astype(np.float64)
    per_layer = [float(d.counts.mean()) for d in decisions]
    return float(all_counts.mean()), float(all_counts.std()), per_layer


# -- evaluation ------------------------------------------------------------------


def evaluate(
    model: MoEModel,
    windows: _Windows,
    threshold: float | None,
    weights: LossWeights,
    batches: int,
) -> tuple[LossBreakdown, float, float, list[float]]:
    """Mean loss and activation statistics over `batches` validation batches.

    No parameter or controller updates happen here; the threshold stays at
    the current training value.
    """
    if windows.n_windows < 1 or batches < 1:
        raise ArgumentError("evaluation needs a non-empty split")
    windows.cursor = 0
    sums = np.zeros(6)
    means, stds, per_layer_acc = [], [], None
    for _ in range(batches):
        x, y = windows.next_batch()
        g = Graph()
        res = model.forward(g, x, threshold=threshold)
        _, br = total_loss(g, res.logits, y.reshape(-1), res.decisions, res.probs,
                           res.raw_logits, weights)
        sums += (br.ce, br.lm_z, br.lb, br.dynamic, br.router_z, br.total)
        mean_a, std_a, per_layer = _activation_stats(res.decisions)
        means.append(mean_a)
        stds.append(std_a)
        per_layer_acc = per_layer if per_layer_acc is None else [
            a + b for a, b in zip(per_layer_acc, per_layer)
        ]
    sums /= batches
    breakdown = LossBreakdown(*sums)
    return (
        breakdown,
        float(np.mean(means)),
        float(np.mean(stds)),
        [a / batches for a in per_layer_acc],
    )


# -- training --------------------------------------------------------------------


@dataclass
class TrainResult:
    sink: TelemetrySink
    model: MoEModel
    final_threshold: float | None
    final_train: StepRecord
    final_val: StepRecord | None
    checkpoint_path: Path | None
    metrics_path: Path | None
    layers_path: Path | None


def train(config: TrainConfig, out_dir=None, flush_interval: int = 200) -> TrainResult:
    """Run the full loop; writes checkpoint and telemetry when out_dir is set."""
    corpus, vocab = make_corpus(config.data_kind, config.data_size, config.seed)
    if vocab > config.model.vocab:
        raise ConfigError(
            f"corpus vocabulary {vocab} exceeds model vocabulary {config.model.vocab}"
        )

    model = MoEModel(config.model, config.strategy, seed=config.seed)
    split = int(corpus.size * 0.9)
    batch_seqs = config.batch_tokens // config.model.seq_len
    train_windows = _Windows(corpus[:split], config.model.seq_len, batch_seqs)
    val_windows = _Windows(corpus[split:], config.model.seq_len, batch_seqs)

    controller = None
    threshold: float | None = None
    if config.strategy.uses_threshold:
        threshold = config.strategy.p
        if config.strategy.kind == "dtopp":
            controller = PIControllerState(
                p0=config.strategy.p, k_pro=config.k_pro, k_int=config.k_int,
                target=config.target, n_experts=config.model.n_experts,
            )

    sink = TelemetrySink(config.model.layers)
    opt_state = AdamWState()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    params = model.parameters()
    final_val: StepRecord | None = None
    record = None
    for step in range(1, config.steps + 1):
        x, y = train_windows.next_batch()
        g = Graph()
        res = model.forward(g, x, threshold=threshold)
        loss_t, breakdown = total_loss(
            g, res.logits, y.reshape(-1), res.decisions, res.probs, res.raw_logits,
            config.weights,
        )
        if not math.isfinite(breakdown.total):
            raise TrainingAborted(
                f"non-finite loss at step {step}: {breakdown}"
            )

        mean_a, std_a, per_layer = _activation_stats(res.decisions)
        threshold_used = threshold
        if controller is not None and (config.pi_during_warmup or step > config.warmup):
            threshold = pi_update(controller, mean_a)

        g.backward(loss_t)
        grads = {name: g.grad(t) for name, t in res.params.items()}
        clip_gradients(grads, config.clip_norm)
        lr = lr_schedule(step, config.warmup, config.steps, config.peak_lr, config.min_lr)
        adamw_step(params, grads, opt_state, lr, config.weight_decay,
                   config.beta1, config.beta2, config.adam_eps)

        record = StepRecord(
            step=step, split="train",
            ce=breakdown.ce, lm_z=breakdown.lm_z, lb=breakdown.lb,
            dynamic=breakdown.dynamic, router_z=breakdown.router_z, total=breakdown.total,
            threshold=threshold_used, mean_active=mean_a, std_active=std_a, lr=lr,
        )
        layer_records = [
            LayerRecord(
                step=step, layer=l, mean_active=per_layer[l],
                theta=None if moe.theta is None else float(moe.theta),
            )
            for l, moe in enumerate(model.moe_layers)
        ]
        sink.record_step(record, layer_records)

        if step % config.eval_interval == 0 or step == config.steps:
            br, vmean, vstd, _ = evaluate(
                model, val_windows, threshold, config.weights, config.eval_batches
            )
            final_val = StepRecord(
                step=step, split="val",
                ce=br.ce, lm_z=br.lm_z, lb=br.lb, dynamic=br.dynamic,
                router_z=br.router_z, total=br.total,
                threshold=threshold, mean_active=vmean, std_active=vstd, lr=lr,
            )
            sink.record_step(final_val, [])

        if out is not None and step % flush_interval == 0:
            sink.export_csv(out)

    checkpoint_path = metrics_path = layers_path = None
    if out is not None:
        checkpoint_path = out / "checkpoint.moelab"
        save_checkpoint(model, checkpoint_path)
        metrics_path, layers_path = sink.export_csv(out)

    return TrainResult(
        sink=sink, model=model, final_threshold=threshold,
        final_train=record, final_val=final_val,
        checkpoint_path=checkpoint_path, metrics_path=metrics_path, layers_path=layers_path,
    )
