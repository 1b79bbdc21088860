#!/usr/bin/env python3
"""Render training telemetry CSVs as figures.

Consumes the frozen schema=1 CSV files written by the training lab and
nothing else; the file format is the only coupling between this script and
the trainer. Five figure kinds:

  loss             train/validation total loss curves
  threshold        the routing threshold trace
  activation-band  mean activated experts shaded by +/- one std
  layer-grid       one panel per layer of per-layer mean activation
  comparison       loss and activation overlays for several runs

Usage:
  plot.py --metrics PATH [PATH ...] [--layers PATH] --kind KIND --out PATH
          [--smooth N]

Smoothing is a trailing moving average, off by default; when enabled the
window length is printed in the figure caption. Input files are never
modified. Exit code 0 on success, 1 on any error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

KINDS = ("loss", "threshold", "activation-band", "layer-grid", "comparison")


class PlotError(Exception):
    pass


@dataclass
class PlotSpec:
    metrics: list[Path]
    kind: str
    out: Path
    layers: Path | None = None
    smooth: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PlotError(f"unknown figure kind {self.kind!r}")
        if self.kind == "comparison":
            if len(self.metrics) < 2:
                raise PlotError("comparison needs at least two metrics files")
        elif self.kind == "layer-grid":
            if self.layers is None:
                raise PlotError("layer-grid needs --layers")
        elif len(self.metrics) != 1:
            raise PlotError(f"kind {self.kind!r} takes exactly one metrics file")


@dataclass
class Table:
    path: Path
    header: list[str]
    rows: list[list[str]] = field(repr=False, default_factory=list)

    def column(self, name: str, as_text: bool = False):
        if name not in self.header:
            raise PlotError(f"{self.path}: missing column: {name}")
        i = self.header.index(name)
        if as_text:
            return [row[i] for row in self.rows]
        return [float(row[i]) if row[i] != "" else None for row in self.rows]


def read_table(path: Path) -> Table:
    if not path.is_file():
        raise PlotError(f"no such file: {path}")
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row and not row[0].startswith("#")]
    if not rows:
        raise PlotError(f"{path}: empty file")
    return Table(path=path, header=rows[0], rows=rows[1:])


def drop_missing(xs, ys):
    pairs = [(x, y) for x, y in zip(xs, ys) if x is not None and y is not None]
    if not pairs:
        raise PlotError("no data to plot")
    return [p[0] for p in pairs], [p[1] for p in pairs]


def smoothed(ys, window: int):
    if window <= 1:
        return ys
    out, acc = [], 0.0
    for i, y in enumerate(ys):
        acc += y
        if i >= window:
            acc -= ys[i - window]
        out.append(acc / min(i + 1, window))
    return out


def split_series(table: Table, column: str, split: str):
    splits = table.column("split", as_text=True)
    steps = table.column("step")
    values = table.column(column)
    xs = [s for s, sp in zip(steps, splits) if sp == split]
    ys = [v for v, sp in zip(values, splits) if sp == split]
    return drop_missing(xs, ys)


def caption(fig, spec: PlotSpec, text: str) -> None:
    if spec.smooth > 1:
        text += f" (smoothed, window {spec.smooth})"
    fig.suptitle(text)


def plot_loss(spec: PlotSpec, fig) -> None:
    table = read_table(spec.metrics[0])
    ax = fig.subplots()
    xs, ys = split_series(table, "total", "train")
    ax.plot(xs, smoothed(ys, spec.smooth), label="train")
    try:
        vx, vy = split_series(table, "total", "val")
        ax.plot(vx, vy, marker="o", ms=3, label="val")
    except PlotError:
        pass  # no validation records is fine
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.legend()
    caption(fig, spec, "training and validation loss")


def plot_threshold(spec: PlotSpec, fig) -> None:
    table = read_table(spec.metrics[0])
    ax = fig.subplots()
    xs, ys = split_series(table, "threshold", "train")
    ax.plot(xs, smoothed(ys, spec.smooth), color="tab:purple")
    ax.set_xlabel("step")
    ax.set_ylabel("routing threshold")
    ax.set_ylim(0.0, 1.0)
    caption(fig, spec, "global probability threshold")


def plot_activation_band(spec: PlotSpec, fig) -> None:
    table = read_table(spec.metrics[0])
    ax = fig.subplots()
    xs, mean = split_series(table, "mean_active", "train")
    _, std = split_series(table, "std_active", "train")
    mean_s = smoothed(mean, spec.smooth)
    std_s = smoothed(std, spec.smooth)
    lo = [m - s for m, s in zip(mean_s, std_s)]
    hi = [m + s for m, s in zip(mean_s, std_s)]
    ax.fill_between(xs, lo, hi, alpha=0.3, label="mean +/- std")
    ax.plot(xs, mean_s, label="mean")
    ax.set_xlabel("step")
    ax.set_ylabel("activated experts per token")
    ax.legend()
    caption(fig, spec, "activated experts")


def plot_layer_grid(spec: PlotSpec, fig) -> None:
    table = read_table(spec.layers)
    steps = table.column("step")
    layers = table.column("layer")
    mean = table.column("mean_active")
    ids = sorted({int(l) for l in layers if l is not None})
    if not ids:
        raise PlotError("no data to plot")
    cols = min(4, len(ids))
    rows = -(-len(ids) // cols)
    axes = fig.subplots(rows, cols, squeeze=False, sharex=True)
    for panel, layer_id in enumerate(ids):
        ax = axes[panel // cols][panel % cols]
        xs = [s for s, l in zip(steps, layers) if l == layer_id]
        ys = [m for m, l in zip(mean, layers) if l == layer_id]
        xs, ys = drop_missing(xs, ys)
        ax.plot(xs, smoothed(ys, spec.smooth))
        ax.set_title(f"layer {layer_id}", fontsize=9)
    for panel in range(len(ids), rows * cols):
        axes[panel // cols][panel % cols].axis("off")
    caption(fig, spec, "per-layer mean activated experts")


def plot_comparison(spec: PlotSpec, fig) -> None:
    (ax_loss, ax_act) = fig.subplots(1, 2)
    for path in spec.metrics:
        table = read_table(path)
        xs, ys = split_series(table, "total", "train")
        ax_loss.plot(xs, smoothed(ys, spec.smooth), label=path.stem)
        xa, ya = split_series(table, "mean_active", "train")
        ax_act.plot(xa, smoothed(ya, spec.smooth), label=path.stem)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("total loss")
    ax_loss.legend(fontsize=8)
    ax_act.set_xlabel("step")
    ax_act.set_ylabel("activated experts")
    ax_act.legend(fontsize=8)
    caption(fig, spec, "run comparison")


_RENDERERS = {
    "loss": plot_loss,
    "threshold": plot_threshold,
    "activation-band": plot_activation_band,
    "layer-grid": plot_layer_grid,
    "comparison": plot_comparison,
}


def plot(spec: PlotSpec) -> Path:
    """Render the figure described by `spec` and write it to spec.out."""
    width = 10.0 if spec.kind in ("comparison", "layer-grid") else 6.0
    fig = plt.figure(figsize=(width, 4.5), dpi=110)
    try:
        _RENDERERS[spec.kind](spec, fig)
        fig.tight_layout()
        spec.out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(spec.out)
    finally:
        plt.close(fig)
    return spec.out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--metrics", nargs="+", required=True, type=Path)
    parser.add_argument("--layers", type=Path)
    parser.add_argument("--kind", required=True, choices=KINDS)
    parser.add_argument("--out", required=True, type=Path)
    parser.add_argument("--smooth", type=int, default=0)
    args = parser.parse_args(argv)
    try:
        spec = PlotSpec(metrics=args.metrics, kind=args.kind, out=args.out,
                        layers=args.layers, smooth=args.smooth)
        plot(spec)
    except PlotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
