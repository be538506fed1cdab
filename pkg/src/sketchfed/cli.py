"""Experiment runner.

Usage::

    sketchfed run CONFIG.json [--out DIR] [--seed N]
    sketchfed sweep 'configs/*.json' --out DIR

A config is a JSON document with the top-level blocks ``experiment``,
``model``, ``data``, ``optimizer``, ``sim`` and optionally ``output``. Unknown
keys anywhere are rejected. ``run`` writes ``metrics.csv`` and ``summary.txt``;
``sweep`` writes one subdirectory per config plus ``sweep.csv`` with a Pareto
column (higher metric and higher overall compression are both better).
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .baselines import FedAvgConfig, LocalTopKConfig, LRSchedule
from .errors import ConfigurationError, SketchFedError
from .fetchsgd import FetchConfig
from .models import MLP, LeastSquares, Logistic, init_weights
from .rng import derive_seed, substream
from .sketch import SketchConfig
from . import sim

log = logging.getLogger("sketchfed")

_DEFAULTS: dict[str, dict[str, Any]] = {
    "experiment": {"rounds": 100, "clients": 10, "participants": 10, "seed": 0},
    "model": {"kind": "least_squares", "hidden": 32},
    "data": {
        "kind": "least_squares",
        "num_features": 32,
        "examples_per_client": 10,
        "cluster_scale": 1.0,
        "noise": 0.1,
        "num_examples": 1000,
        "num_classes": 10,
        "separation": 3.0,
        "partition": "noniid",
        "classes_per_client": 1,
    },
    "sim": {
        "batch_size": None,
        "weighting": "uniform",
        "download": "last_sync",
        "sparse_encoding": "values",
        "sketch_encoding": "table",
    },
    "output": {"dir": "out"},
}

_OPTIMIZER_KEYS = {
    "fetchsgd": {
        "name", "eta", "k", "rho", "rows", "cols", "sketch_seed", "error_mode",
        "momentum_masking", "error_structure", "window", "tau",
    },
    "fedavg": {
        "name", "local_epochs", "local_batch", "local_lr", "global_epochs_fraction",
        "global_momentum", "lr_schedule",
    },
    "localtopk": {"name", "k", "lr", "local_error", "global_momentum"},
}


def _check_keys(block: dict, allowed, where: str) -> None:
    if not isinstance(block, dict):
        raise ConfigurationError(f"{where}: expected an object")
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise ConfigurationError(f"{where}: unknown key(s) {', '.join(unknown)}")


@dataclass
class ExperimentConfig:
    experiment: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentConfig:
        _check_keys(doc, ("experiment", "model", "data", "optimizer", "sim", "output"), "config")
        if "optimizer" not in doc:
            raise ConfigurationError("config: missing 'optimizer' block")
        blocks = {}
        for name, defaults in _DEFAULTS.items():
            given = doc.get(name, {})
            _check_keys(given, defaults, name)
            blocks[name] = {**defaults, **given}
        opt = dict(doc["optimizer"])
        if opt.get("name") not in _OPTIMIZER_KEYS:
            raise ConfigurationError(f"optimizer.name: must be one of {sorted(_OPTIMIZER_KEYS)}")
        _check_keys(opt, _OPTIMIZER_KEYS[opt["name"]], "optimizer")
        cfg = cls(optimizer=opt, **blocks)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {
            "experiment": dict(self.experiment),
            "model": dict(self.model),
            "data": dict(self.data),
            "optimizer": dict(self.optimizer),
            "sim": dict(self.sim),
            "output": dict(self.output),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    # -- validation and construction -----------------------------------------

    @property
    def seed(self) -> int:
        return int(self.experiment["seed"])

    def validate(self) -> None:
        ex = self.experiment
        for key in ("rounds", "clients", "participants", "seed"):
            if not isinstance(ex[key], int) or isinstance(ex[key], bool) or ex[key] < 0:
                raise ConfigurationError(f"experiment.{key}: must be a non-negative integer")
        if ex["clients"] < 1:
            raise ConfigurationError("experiment.clients: must be positive")
        if not 1 <= ex["participants"] <= ex["clients"]:
            raise ConfigurationError(
                f"experiment.participants: W={ex['participants']} must lie in [1, C={ex['clients']}]"
            )
        if self.model["kind"] not in ("least_squares", "logistic", "mlp"):
            raise ConfigurationError(f"model.kind: unknown model {self.model['kind']!r}")
        if self.data["kind"] not in ("least_squares", "blobs"):
            raise ConfigurationError(f"data.kind: unknown dataset {self.data['kind']!r}")
        if (self.data["kind"] == "least_squares") != (self.model["kind"] == "least_squares"):
            raise ConfigurationError("model.kind: least_squares models need least_squares data and vice versa")
        if self.data["partition"] not in ("noniid", "iid"):
            raise ConfigurationError(f"data.partition: unknown partition {self.data['partition']!r}")
        try:
            sim.RoundConfig(participants=ex["participants"], **self.sim)
        except (SketchFedError, TypeError) as exc:
            raise ConfigurationError(f"sim: {exc}") from exc
        try:
            self.build_optimizer(self.build_model().dim)
        except ConfigurationError as exc:
            if str(exc).startswith("optimizer"):
                raise
            raise ConfigurationError(f"optimizer: {exc}") from exc
        except (SketchFedError, TypeError) as exc:
            raise ConfigurationError(f"optimizer: {exc}") from exc

    def build_model(self):
        kind = self.model["kind"]
        f = self.data["num_features"]
        if kind == "least_squares":
            return LeastSquares(f)
        if kind == "logistic":
            return Logistic(f, self.data["num_classes"])
        return MLP(f, self.model["hidden"], self.data["num_classes"])

    def build_optimizer(self, dim: int):
        opt = {k: v for k, v in self.optimizer.items() if k != "name"}
        name = self.optimizer["name"]
        if name == "fetchsgd":
            sketch_seed = opt.pop("sketch_seed", None)
            if sketch_seed is None:
                sketch_seed = derive_seed(self.seed, "sketch")
            rows = opt.pop("rows", 5)
            cols = opt.pop("cols", max(16, dim // 10))
            sketch = SketchConfig(rows, cols, dim, sketch_seed)
            if "eta" not in opt or "k" not in opt:
                raise ConfigurationError("optimizer: fetchsgd needs 'eta' and 'k'")
            return FetchConfig(sketch=sketch, **opt)
        if name == "localtopk":
            if "k" not in opt:
                raise ConfigurationError("optimizer: localtopk needs 'k'")
            if opt["k"] > dim:
                raise ConfigurationError(f"optimizer.k: {opt['k']} exceeds model dimension {dim}")
            return LocalTopKConfig(**opt)
        if "lr_schedule" in opt and opt["lr_schedule"] is not None:
            opt["lr_schedule"] = LRSchedule(tuple(tuple(p) for p in opt["lr_schedule"]))
        return FedAvgConfig(**opt)

    def build_data(self) -> sim.Federation:
        data, seed = self.data, self.seed
        clients = self.experiment["clients"]
        rng = substream(seed, "data")
        if data["kind"] == "least_squares":
            shards, _ = sim.make_least_squares_clients(
                clients, data["examples_per_client"], data["num_features"], rng,
                cluster_scale=data["cluster_scale"], noise=data["noise"],
            )
            return sim.Federation(shards)
        X, y = sim.make_blobs(data["num_examples"], data["num_features"], data["num_classes"], rng, data["separation"])
        if data["partition"] == "iid":
            return sim.Federation(sim.partition_iid(X, y, clients, seed))
        return sim.Federation(sim.partition_noniid(X, y, clients, data["classes_per_client"], seed))


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(doc)


@dataclass
class RunResult:
    history: list
    summary: dict


def execute(cfg: ExperimentConfig) -> RunResult:
    """Run a validated config in memory."""
    model = cfg.build_model()
    fed = cfg.build_data()
    optimizer = cfg.build_optimizer(model.dim)
    round_cfg = sim.RoundConfig(participants=cfg.experiment["participants"], **cfg.sim)
    base_rounds = cfg.experiment["rounds"]
    rounds = optimizer.rounds(base_rounds) if isinstance(optimizer, FedAvgConfig) else base_rounds
    w0 = init_weights(model, substream(cfg.seed, "init"))
    state, history = sim.simulate(w0, optimizer, fed, model, round_cfg, rounds, cfg.seed)

    init_loss, init_grad = sim.risk_and_grad(w0, fed, model)
    final_risk = sim.evaluate_risk(state.weights, fed, model)
    grad_norms = [m.grad_norm_sq for m in history] or [float(init_grad @ init_grad)]
    d, W = model.dim, cfg.experiment["participants"]
    dense_round = W * sim.account_bytes(("dense", d))
    base_up = base_down = base_rounds * dense_round
    acc = sim.accuracy(state.weights, fed, model)
    summary = {
        "optimizer": cfg.optimizer["name"],
        "rounds": len(history),
        "dim": d,
        "initial_risk": float(init_loss),
        "final_risk": float(final_risk),
        "final_train_loss": history[-1].train_loss if history else float(init_loss),
        "min_grad_norm_sq": min(grad_norms),
        "final_accuracy": acc if acc is not None else math.nan,
        "total_bytes_up": state.bytes_up,
        "total_bytes_down": state.bytes_down,
        "upload_compression": sim.compression_ratio(base_up, state.bytes_up),
        "download_compression": sim.compression_ratio(base_down, state.bytes_down),
        "overall_compression": sim.compression_ratio(base_up + base_down, state.bytes_up + state.bytes_down),
    }
    return RunResult(history, summary)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def summary_text(summary: dict) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in summary.items())


def run_experiment(cfg: ExperimentConfig, out_dir) -> RunResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = execute(cfg)
    sim.write_metrics(result.history, out / "metrics.csv")
    (out / "summary.txt").write_text(summary_text(result.summary), encoding="utf-8")
    return result


def pareto_flags(points: Sequence[tuple[float, float]]) -> list[bool]:
    """Mark points not dominated when maximizing both coordinates. NaN rows are never Pareto."""
    flags = []
    for i, (m, c) in enumerate(points):
        if math.isnan(m) or math.isnan(c):
            flags.append(False)
            continue
        dominated = any(
            (m2 >= m and c2 >= c and (m2 > m or c2 > c))
            for j, (m2, c2) in enumerate(points)
            if j != i and not (math.isnan(m2) or math.isnan(c2))
        )
        flags.append(not dominated)
    return flags


def sweep_metric(summary: dict) -> float:
    """Accuracy for classifiers, negative final risk otherwise."""
    acc = summary["final_accuracy"]
    return acc if not math.isnan(acc) else -summary["final_risk"]


SWEEP_FIELDS = ("config_id", "status", "metric", "final_risk", "overall_compression",
                "upload_compression", "download_compression", "pareto", "error")


def sweep(paths: Sequence, out_dir) -> list[dict]:
    """Run each config; failures become rows with ``status=error``."""
    if not paths:
        raise ConfigurationError("sweep needs at least one config")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in sorted(str(p) for p in paths):
        config_id = Path(path).stem
        row = {"config_id": config_id, "status": "ok", "metric": math.nan, "final_risk": math.nan,
               "overall_compression": math.nan, "upload_compression": math.nan,
               "download_compression": math.nan, "error": ""}
        try:
            res = run_experiment(load_config(path), out / config_id)
            s = res.summary
            row.update(metric=sweep_metric(s), final_risk=s["final_risk"],
                       overall_compression=s["overall_compression"],
                       upload_compression=s["upload_compression"],
                       download_compression=s["download_compression"])
        except (SketchFedError, OSError, ValueError) as exc:
            log.warning("config %s failed: %s", config_id, exc)
            row.update(status="error", error=str(exc))
        rows.append(row)
    flags = pareto_flags([(r["metric"], r["overall_compression"]) for r in rows])
    for r, flag in zip(rows, flags):
        r["pareto"] = int(flag)
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_FIELDS)
        for r in rows:
            writer.writerow([_fmt(r[k]) for k in SWEEP_FIELDS])
    return rows


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="sketchfed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_sweep = sub.add_parser("sweep", help="run every config matching a glob")
    p_sweep.add_argument("pattern")
    p_sweep.add_argument("--out", required=True)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    try:
        if args.command == "run":
            cfg = load_config(args.config)
            if args.seed is not None:
                if not 0 <= args.seed < 2**64:
                    raise ConfigurationError("--seed: must be an unsigned 64-bit integer")
                cfg.experiment["seed"] = args.seed
            out = args.out or cfg.output["dir"]
            res = run_experiment(cfg, out)
            log.info("wrote %s (final_risk=%.6g)", os.path.join(out, "metrics.csv"), res.summary["final_risk"])
        else:
            paths = glob.glob(args.pattern)
            if not paths:
                raise ConfigurationError(f"no configs match {args.pattern!r}")
            rows = sweep(paths, args.out)
            log.info("swept %d configs, %d on the Pareto frontier", len(rows), sum(r["pareto"] for r in rows))
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SketchFedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
