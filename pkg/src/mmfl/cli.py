"""Command-line runner: ``mmfl gen``, ``mmfl train``, ``mmfl ablate``.

All three read one JSON run configuration. Unknown keys, wrong types and
invalid values are configuration errors (exit code 2); anything that goes
wrong while running is a runtime error (exit code 3). Results go to stdout,
diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import types
import typing
from dataclasses import dataclass
from pathlib import Path
from statistics import median

from .data import DatasetSpec, generate_dataset, partition, read_dataset, write_dataset
from .errors import InvalidConfig, InvalidSpec, MMFLError
from .federation import FederationConfig, ExperimentResult, msfedavg_train, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

ROUND_COLUMNS = ["round", "client_id", "loss_total", "loss_ntx", "loss_bce", "micro_f1", "macro_f1", "wall_ms"]

ABLATION_ROWS = {
    "MF": dict(fw=False, mim=False),
    "MF+MIM": dict(fw=False, mim=True),
    "MF+FW": dict(fw=True, mim=False),
    "MF+FW+MIM": dict(fw=True, mim=True),
}


class ConfigError(MMFLError):
    """A run configuration that cannot be used; names the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec = DatasetSpec()
    federation: FederationConfig = FederationConfig()
    # read the dataset from this file; None generates it from ``dataset``
    dataset_path: str | None = None
    method: str = "proposed"
    scenario: int = 1
    test_fraction: float = 0.2
    out: str = "runs"
    report_format: str = "json"

    def validate(self) -> None:
        if self.method not in ("proposed", "msfedavg"):
            raise ConfigError("method", f"expected 'proposed' or 'msfedavg', got {self.method!r}")
        if self.scenario not in (1, 2):
            raise ConfigError("scenario", f"expected 1 or 2, got {self.scenario!r}")
        if self.report_format not in ("json", "csv"):
            raise ConfigError("report_format", f"expected 'json' or 'csv', got {self.report_format!r}")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction", "must lie in (0, 1)")
        for section, check in (("dataset", self.dataset.validate),
                               ("federation", lambda: self.federation.validate(len(self.dataset.modalities)))):
            try:
                check()
            except (InvalidSpec, InvalidConfig) as exc:
                raise ConfigError(section, str(exc)) from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# strict loading
# ---------------------------------------------------------------------------


def _convert(tp, value, key: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        options = typing.get_args(tp)
        if value is None and type(None) in options:
            return None
        for option in options:
            if option is type(None):
                continue
            try:
                return _convert(option, value, key)
            except ConfigError:
                pass
        raise ConfigError(key, f"does not match {tp}")
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(key, f"expected an object, got {type(value).__name__}")
        return _build(tp, value, key)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {type(value).__name__}")
        args = typing.get_args(tp)
        item = args[0]
        return tuple(_convert(item, v, f"{key}[{i}]") for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    raise ConfigError(key, f"unsupported field type {tp}")


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    for key in data:
        if key not in names:
            raise ConfigError(f"{prefix}.{key}" if prefix else key, "unknown key")
    kwargs = {k: _convert(hints[k], v, f"{prefix}.{k}" if prefix else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (InvalidSpec, InvalidConfig) as exc:
        raise ConfigError(prefix, str(exc)) from None


def load_config(path: str | os.PathLike | None) -> RunConfig:
    """Read and validate a RunConfig; no path means all defaults."""
    if path is None:
        data = {}
    else:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError("", f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"malformed JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError("", "top level must be a JSON object")
    cfg = _build(RunConfig, data)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _load_dataset(cfg: RunConfig):
    if cfg.dataset_path is None:
        return generate_dataset(cfg.dataset)
    return read_dataset(cfg.dataset_path)


def _run(cfg: RunConfig, ds, threads: int) -> ExperimentResult:
    fed = cfg.federation
    part = partition(ds, fed.n_clients, fed.modality_of, cfg.scenario, fed.seed, cfg.test_fraction)
    train = msfedavg_train if cfg.method == "msfedavg" else run_experiment
    return train(fed, part, threads)


def _report(cfg: RunConfig, result: ExperimentResult) -> dict:
    return {
        "config": cfg.to_dict(),
        "method": cfg.method,
        "scenario": cfg.scenario,
        "final": result.report.as_dict(),
        "rounds": [
            {"round": r.round, "micro_f1": r.metrics.micro_f1, "macro_f1": r.metrics.macro_f1, "wall_ms": r.wall_ms}
            for r in result.records
        ],
        "wall_ms_total": sum(r.wall_ms for r in result.records),
    }


def _write_rounds(path: Path, result: ExperimentResult) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ROUND_COLUMNS)
        writer.writeheader()
        for r in result.records:
            for row in r.clients:
                writer.writerow({
                    "round": r.round, "client_id": row["client_id"],
                    "loss_total": row["loss_total"], "loss_ntx": row["loss_ntx"], "loss_bce": row["loss_bce"],
                    "micro_f1": r.metrics.micro_f1, "macro_f1": r.metrics.macro_f1, "wall_ms": row["wall_ms"],
                })


def _emit(cfg: RunConfig, rows: list[dict]) -> None:
    if cfg.report_format == "json":
        for row in rows:
            print(json.dumps(row, sort_keys=True))
    else:
        writer = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _seed_list(cfg: RunConfig, n: int) -> list[int]:
    if n < 1:
        raise ConfigError("--seeds", "must be at least 1")
    return [cfg.federation.seed + i for i in range(n)]


def _with_seed(cfg: RunConfig, seed: int, **fed_changes) -> RunConfig:
    return dataclasses.replace(cfg, federation=dataclasses.replace(cfg.federation, seed=seed, **fed_changes))


def cmd_gen(cfg: RunConfig, out: Path) -> None:
    ds = generate_dataset(cfg.dataset)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out)
    print(json.dumps({"path": str(out), "n_samples": len(ds), "spec": cfg.dataset.to_dict()}, sort_keys=True))


def cmd_train(cfg: RunConfig, out: Path, seeds: int, threads: int) -> None:
    ds = _load_dataset(cfg)
    rows = []
    for seed in _seed_list(cfg, seeds):
        run_cfg = _with_seed(cfg, seed)
        run_dir = out if seeds == 1 else out / f"seed-{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        result = _run(run_cfg, ds, threads)
        _write_rounds(run_dir / "rounds.csv", result)
        (run_dir / "report.json").write_text(json.dumps(_report(run_cfg, result), indent=2, sort_keys=True))
        rows.append({"seed": seed, "method": cfg.method, "scenario": cfg.scenario,
                     "micro_f1": result.report.micro_f1, "macro_f1": result.report.macro_f1})
    _emit(cfg, rows)


def cmd_ablate(cfg: RunConfig, out: Path, seeds: int, threads: int) -> None:
    """Every module combination on both scenarios, sharing one dataset."""
    ds = _load_dataset(cfg)
    seed_list = _seed_list(cfg, seeds)
    cells = []
    for name, toggles in ABLATION_ROWS.items():
        for scenario in (1, 2):
            scores, walls = [], []
            for seed in seed_list:
                run_cfg = dataclasses.replace(_with_seed(cfg, seed, **toggles), method="proposed", scenario=scenario)
                result = _run(run_cfg, ds, threads)
                scores.append(result.report.macro_f1)
                walls.append(sum(r.wall_ms for r in result.records))
            cells.append({
                "method": name, "scenario": scenario, "seeds": seed_list, "macro_f1": scores,
                "median": median(scores), "spread": max(scores) - min(scores), "wall_ms": walls,
            })
    out.mkdir(parents=True, exist_ok=True)
    grid = {"config": cfg.to_dict(), "dataset_seed": ds.spec.seed, "cells": cells}
    (out / "ablation.json").write_text(json.dumps(grid, indent=2, sort_keys=True))
    _emit(cfg, [{"method": c["method"], "scenario": c["scenario"], "median": c["median"], "spread": c["spread"]}
                for c in cells])


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmfl", description="Multi-modal federated learning experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("gen", help="generate a synthetic dataset file")
    gen.add_argument("--config", help="RunConfig JSON (defaults if omitted)")
    gen.add_argument("--out", required=True, help="dataset file to write")
    for name, helptext in (("train", "run one federated experiment"), ("ablate", "run the module-combination grid")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="RunConfig JSON (defaults if omitted)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
        p.add_argument("--client-threads", type=int, default=None, help="parallel client threads")
        if name == "train":
            p.add_argument("--scenario", type=int, choices=(1, 2))
            p.add_argument("--method", choices=("proposed", "msfedavg"))
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config)
        overrides = {k: v for k, v in (("scenario", getattr(args, "scenario", None)),
                                       ("method", getattr(args, "method", None)),
                                       ("out", args.out if args.command != "gen" else None)) if v is not None}
        cfg = dataclasses.replace(cfg, **overrides)
        cfg.validate()
        if args.command == "gen":
            cmd_gen(cfg, Path(args.out))
            return EXIT_OK
        threads = args.client_threads
        if threads is None:
            threads = min(cfg.federation.n_clients, os.cpu_count() or 1)
        if threads < 1:
            raise ConfigError("--client-threads", "must be at least 1")
        command = cmd_train if args.command == "train" else cmd_ablate
        command(cfg, Path(cfg.out), args.seeds, threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MMFLError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
