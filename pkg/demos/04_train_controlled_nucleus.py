#!/usr/bin/env python3
"""Train a small controlled-nucleus model and watch the sparsity settle.

A 2-layer toy language model on the synthetic grammar, routed by a
feedback-controlled nucleus threshold with per-layer routing temperatures.
The controller holds the batch-averaged activated-expert count at the
target while the layers drift toward their own sparsity patterns. Takes
about half a minute; artifacts land in runs/demo/.

For the full-size experiment (4 layers, 2000 steps) use the CLI:
  moelab run --config configs/dtopp.cfg --out runs/dtopp
"""

import numpy as np

from moelab import LossWeights, RoutingStrategy, ToyModelConfig, TrainConfig, train

config = TrainConfig(
    model=ToyModelConfig(layers=2, hidden=32, expert_dim=16, n_experts=8,
                         vocab=64, seq_len=32),
    strategy=RoutingStrategy(kind="dtopp", p=0.25, normalization="dynamic"),
    # entropy coefficient tuned down for the small grammar task; see configs/
    weights=LossWeights(lm_z=1e-4, lb=1e-4, dynamic=1e-5, router_z=0.0),
    target=3,
    steps=300, warmup=15, batch_tokens=512,
    eval_interval=100, data_size=100_000, seed=1,
)

print(f"training: {config.model.layers} layers, {config.model.n_experts} experts, "
      f"target {config.target} active, {config.steps} steps")
result = train(config, out_dir="runs/demo")

train_records = [r for r in result.sink.steps if r.split == "train"]
print(f"\n{'step':>5} {'loss':>7} {'active':>7} {'threshold':>9}")
for r in train_records[:: len(train_records) // 10]:
    print(f"{r.step:5d} {r.total:7.3f} {r.mean_active:7.2f} {r.threshold:9.4f}")

last = train_records[-50:]
print(f"\nmean activation over the last 50 steps: "
      f"{np.mean([r.mean_active for r in last]):.2f} (target {config.target})")
per_layer = {}
for rec in result.sink.layers:
    if rec.step > config.steps - 50:
        per_layer.setdefault(rec.layer, []).append(rec.mean_active)
for layer, vals in sorted(per_layer.items()):
    theta = [r.theta for r in result.sink.layers if r.layer == layer][-1]
    print(f"  layer {layer}: {np.mean(vals):.2f} experts, temperature {theta:.3f}")
print(f"\nartifacts: {result.metrics_path}, {result.layers_path}, "
      f"{result.checkpoint_path}")
print("plot them with, e.g.:")
print("  python3 plotkit/plot.py --metrics runs/demo/metrics.csv "
      "--kind activation-band --out runs/demo/band.png")
