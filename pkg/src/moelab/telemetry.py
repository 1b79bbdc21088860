"""Deterministic capture and CSV export of training statistics.

Two frozen tables, exported with 9 significant digits, LF line endings and
a leading "# schema=1" comment:

  metrics.csv  step,split,ce,lm_z,lb,dynamic,router_z,total,threshold,mean_active,std_active,lr
  layers.csv   step,layer,mean_active,theta

Absent values (e.g. the threshold of a fixed-count run) serialize as empty
fields. Export is byte-deterministic given identical record sequences, so
re-exporting mid-run is safe.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .errors import ArgumentError

SCHEMA_LINE = "# schema=1"
METRICS_HEADER = "step,split,ce,lm_z,lb,dynamic,router_z,total,threshold,mean_active,std_active,lr"
LAYERS_HEADER = "step,layer,mean_active,theta"


@dataclass
class StepRecord:
    step: int
    split: str  # "train" or "val"
    ce: float
    lm_z: float
    lb: float
    dynamic: float
    router_z: float
    total: float
    threshold: float | None
    mean_active: float
    std_active: float
    lr: float


@dataclass
class LayerRecord:
    step: int
    layer: int
    mean_active: float
    theta: float | None


def format_real(v: float | None) -> str:
    """9 significant digits, always with a decimal point or exponent."""
    if v is None:
        return ""
    s = f"{float(v):.9g}"
    if "." not in s and "e" not in s and "n" not in s and "i" not in s:
        s += ".0"
    return s


class TelemetrySink:
    """Append-only in-memory store with ordering validation."""

    def __init__(self, n_layers: int):
        if n_layers < 1:
            raise ArgumentError("sink needs at least one layer")
        self.n_layers = n_layers
        self.steps: list[StepRecord] = []
        self.layers: list[LayerRecord] = []
        self._last_step = {"train": -1, "val": -1}

    def record_step(self, record: StepRecord, layer_records: list[LayerRecord]) -> None:
        if record.split not in self._last_step:
            raise ArgumentError(f"unknown split {record.split!r}")
        if record.step <= self._last_step[record.split]:
            raise ArgumentError(
                f"out-of-order step {record.step} for split {record.split!r} "
                f"(last was {self._last_step[record.split]})"
            )
        if layer_records and len(layer_records) != self.n_layers:
            raise ArgumentError(
                f"expected {self.n_layers} layer records, got {len(layer_records)}"
            )
        for lr in layer_records:
            if lr.step != record.step:
                raise ArgumentError("layer record step does not match the step record")
        self._last_step[record.split] = record.step
        self.steps.append(record)
        self.layers.extend(layer_records)

    # -- export ------------------------------------------------------------

    def export_csv(self, out_dir) -> tuple[Path, Path]:
        """Write metrics.csv and layers.csv; returns both paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        layers_path = out / "layers.csv"

        lines = [SCHEMA_LINE, METRICS_HEADER]
        for r in self.steps:
            lines.append(",".join([
                str(r.step), r.split,
                format_real(r.ce), format_real(r.lm_z), format_real(r.lb),
                format_real(r.dynamic), format_real(r.router_z), format_real(r.total),
                format_real(r.threshold),
                format_real(r.mean_active), format_real(r.std_active), format_real(r.lr),
            ]))
        metrics_path.write_bytes(("\n".join(lines) + "\n").encode("ascii"))

        lines = [SCHEMA_LINE, LAYERS_HEADER]
        for r in self.layers:
            lines.append(",".join([
                str(r.step), str(r.layer), format_real(r.mean_active), format_real(r.theta),
            ]))
        layers_path.write_bytes(("\n".join(lines) + "\n").encode("ascii"))
        return metrics_path, layers_path


def _parse_real(field: str) -> float | None:
    return None if field == "" else float(field)


def read_metrics_csv(path) -> list[StepRecord]:
    records = []
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row and not row[0].startswith("#")]
    if not rows or ",".join(rows[0]) != METRICS_HEADER:
        raise ArgumentError(f"unrecognized metrics header in {path}")
    for row in rows[1:]:
        records.append(StepRecord(
            step=int(row[0]), split=row[1],
            ce=float(row[2]), lm_z=float(row[3]), lb=float(row[4]),
            dynamic=float(row[5]), router_z=float(row[6]), total=float(row[7]),
            threshold=_parse_real(row[8]),
            mean_active=float(row[9]), std_active=float(row[10]), lr=float(row[11]),
        ))
    return records


def read_layers_csv(path) -> list[LayerRecord]:
    records = []
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row and not row[0].startswith("#")]
    if not rows or ",".join(rows[0]) != LAYERS_HEADER:
        raise ArgumentError(f"unrecognized layers header in {path}")
    for row in rows[1:]:
        records.append(LayerRecord(
            step=int(row[0]), layer=int(row[1]),
            mean_active=float(row[2]), theta=_parse_real(row[3]),
        ))
    return records
