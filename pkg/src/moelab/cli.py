"""Command-line entry point: run experiments, compare strategies, self-verify.

Exit codes: 0 success, 1 configuration problem, 2 training aborted on a
numerical failure, 3 self-verification failure. `compare` honors the
MOE_LAB_THREADS environment variable (default 1) for parallel runs.

Config files are INI with sections [strategy], [model], [optimizer],
[losses], [pi] and [data]; any CLI flag overrides the file, which overrides
the built-in default.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

from . import selfcheck
from .errors import ConfigError, MoeLabError, TrainingAborted
from .losses import LossWeights
from .model import ToyModelConfig
from .routing import RoutingStrategy
from .telemetry import format_real
from .trainer import TrainConfig, train

MANIFEST_SCHEMA = 1
SUMMARY_HEADER = "config,seed,final_train_loss,final_val_loss,mean_active_final,threshold_final"

_SECTIONS = {
    "strategy": {"kind": str, "k": int, "p": float, "normalization": str, "tau": float,
                 "target": int},
    "model": {"layers": int, "hidden": int, "expert_dim": int, "experts": int,
              "vocab": int, "seq_len": int, "tie_weights": bool},
    "optimizer": {"steps": int, "batch_tokens": int, "peak_lr": float, "min_lr": float,
                  "warmup": int, "weight_decay": float, "beta1": float, "beta2": float,
                  "eps": float, "clip_norm": float},
    "losses": {"lm_z": float, "lb": float, "dynamic": float, "router_z": float},
    "pi": {"k_pro": float, "k_int": float, "during_warmup": bool},
    "data": {"kind": str, "size": int, "seed": int, "eval_interval": int,
             "eval_batches": int},
}


def _read_config_file(path: Path) -> dict[str, dict]:
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            typ = _SECTIONS[section][key]
            try:
                if typ is bool:
                    values[section][key] = parser.getboolean(section, key)
                else:
                    values[section][key] = typ(raw)
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for {section}.{key}: {raw!r}") from exc
    return values


def build_train_config(file_values: dict[str, dict], overrides: dict) -> TrainConfig:
    """Merge built-in defaults, config-file values, and CLI overrides."""
    def section(name: str) -> dict:
        return dict(file_values.get(name, {}))

    strat = section("strategy")
    for key in ("strategy", "target", "p0", "kpro", "kint", "seed"):
        if overrides.get(key) is None:
            continue
        if key == "strategy":
            strat["kind"] = overrides[key]
        elif key == "target":
            strat["target"] = overrides[key]
        elif key == "p0":
            strat["p"] = overrides[key]

    kind = strat.get("kind", "dtopp")
    target = strat.get("target", 4)
    strategy = RoutingStrategy(
        kind=kind,
        k=target if kind == "topk" else None,
        p=strat.get("p", 0.25) if kind != "topk" else None,
        normalization=strat.get(
            "normalization", "dynamic" if kind == "dtopp" else "global"
        ),
        tau=strat.get("tau", 1.0),
    )

    mod = section("model")
    model = ToyModelConfig(
        layers=mod.get("layers", 4), hidden=mod.get("hidden", 64),
        expert_dim=mod.get("expert_dim", 32), n_experts=mod.get("experts", 16),
        vocab=mod.get("vocab", 64), seq_len=mod.get("seq_len", 32),
        tie_weights=mod.get("tie_weights", True),
    )

    loss = section("losses")
    weights = LossWeights(
        lm_z=loss.get("lm_z", 1e-4), lb=loss.get("lb", 1e-4),
        dynamic=loss.get("dynamic", 1e-3), router_z=loss.get("router_z", 0.0),
    )

    opt = section("optimizer")
    pi = section("pi")
    data = section("data")
    try:
        return TrainConfig(
            model=model, strategy=strategy, weights=weights,
            target=target,
            k_pro=overrides.get("kpro") if overrides.get("kpro") is not None else pi.get("k_pro", 0.1),
            k_int=overrides.get("kint") if overrides.get("kint") is not None else pi.get("k_int", 0.1),
            pi_during_warmup=pi.get("during_warmup", True),
            steps=opt.get("steps", 2000), batch_tokens=opt.get("batch_tokens", 2048),
            peak_lr=opt.get("peak_lr", 3e-3), min_lr=opt.get("min_lr", 3e-5),
            warmup=opt.get("warmup", 100), weight_decay=opt.get("weight_decay", 3.3e-2),
            beta1=opt.get("beta1", 0.9), beta2=opt.get("beta2", 0.95),
            adam_eps=opt.get("eps", 1e-8), clip_norm=opt.get("clip_norm", 1.0),
            data_kind=data.get("kind", "synthetic-grammar"),
            data_size=data.get("size", 200_000),
            eval_interval=data.get("eval_interval", 100),
            eval_batches=data.get("eval_batches", 4),
            seed=overrides.get("seed") if overrides.get("seed") is not None else data.get("seed", 0),
        )
    except MoeLabError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def write_manifest(out: Path, config: TrainConfig, artifacts: dict[str, str]) -> Path:
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "seed": config.seed,
        "config": asdict(config),
        "artifacts": artifacts,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _run_one(config: TrainConfig, out: Path):
    result = train(config, out_dir=out)
    write_manifest(out, config, {
        "checkpoint": result.checkpoint_path.name,
        "metrics": result.metrics_path.name,
        "layers": result.layers_path.name,
    })
    return result


def cmd_run(args) -> int:
    try:
        file_values = _read_config_file(Path(args.config))
        config = build_train_config(file_values, vars(args))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        result = _run_one(config, out)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 2
    except MoeLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    tr = result.final_train
    print(f"done: {config.steps} steps, final train loss {tr.total:.4f}, "
          f"mean active {tr.mean_active:.2f} -> {out}")
    return 0


def cmd_compare(args) -> int:
    if len(args.configs) < 2:
        print("error: compare needs at least 2 configs", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    try:
        for idx, cfg_path in enumerate(args.configs):
            file_values = _read_config_file(Path(cfg_path))
            for seed in args.seeds:
                config = build_train_config(file_values, {"seed": seed})
                run_dir = out / f"run{idx:02d}_{Path(cfg_path).stem}_seed{seed}"
                jobs.append((cfg_path, seed, config, run_dir))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    threads = max(1, int(os.environ.get("MOE_LAB_THREADS", "1")))
    failures = 0
    rows = []

    def execute(job):
        cfg_path, seed, config, run_dir = job
        return cfg_path, seed, _run_one(config, run_dir)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        for job, future in [(j, pool.submit(execute, j)) for j in jobs]:
            try:
                cfg_path, seed, result = future.result()
            except MoeLabError as exc:
                failures += 1
                print(f"run failed ({job[0]}, seed {job[1]}): {exc}", file=sys.stderr)
                continue
            tr, val = result.final_train, result.final_val
            rows.append(",".join([
                str(cfg_path), str(seed),
                format_real(tr.total),
                format_real(val.total if val is not None else None),
                format_real(tr.mean_active),
                format_real(result.final_threshold),
            ]))
    (out / "summary.csv").write_text(SUMMARY_HEADER + "\n" + "".join(r + "\n" for r in rows))
    if failures:
        print(f"{failures} run(s) failed; partial results kept in {out}", file=sys.stderr)
        return 1
    print(f"compared {len(jobs)} runs -> {out / 'summary.csv'}")
    return 0


def cmd_selftest(args) -> int:
    fault = getattr(args, "fault", None) or os.environ.get("MOELAB_SELFTEST_FAULT")
    ok = True
    for group, passed, detail in selfcheck.run_groups(fault=fault):
        print(f"{'ok  ' if passed else 'FAIL'} {group}" + (f": {detail}" if detail else ""))
        if not passed:
            ok = False
    return 0 if ok else 3


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="moelab",
        description="Desk-scale laboratory for sparsity-controlled expert routing",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train one model from a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--strategy", choices=["topk", "topp", "dtopp"])
    p_run.add_argument("--target", type=int)
    p_run.add_argument("--p0", type=float)
    p_run.add_argument("--kpro", type=float)
    p_run.add_argument("--kint", type=float)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="run several (config, seed) pairs")
    p_cmp.add_argument("--configs", nargs="+", required=True)
    p_cmp.add_argument("--seeds", nargs="+", type=int, default=[0])
    p_cmp.add_argument("--out", required=True)
    p_cmp.set_defaults(func=cmd_compare)

    p_self = sub.add_parser("selftest", help="run the verification suites")
    p_self.add_argument("--fault", help=argparse.SUPPRESS)  # test hook
    p_self.set_defaults(func=cmd_selftest)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
