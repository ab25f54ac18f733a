"""Experiment orchestration for the timed, convergence and grid-tuned protocols."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datasets import (
    Dataset,
    Split,
    carve_validation,
    default_hidden_units,
    default_n_splits,
    generate_splits,
    has_fixed_splits,
    load_fixed_splits,
    read_grid_file,
)
from .hypersearch import (
    DEFAULT_DROPOUT_BOUNDS,
    DEFAULT_DROPOUT_GRID,
    TAU_SPAN,
    BOBounds,
    HyperPair,
    SearchSpace,
    bo_search,
    default_tau_grid,
    fit_model,
    grid_search,
    validation_objective,
)
from .inference import DEFAULT_MC_SAMPLES, evaluate
from .nn import DEFAULT_LENGTHSCALE, MLPConfig, TrainConfig, save_model

__all__ = [
    "SETTINGS",
    "DEFAULT_EPOCHS",
    "SCHEMA_VERSION",
    "ExperimentError",
    "ProtocolConfig",
    "SplitRecord",
    "Aggregates",
    "ExperimentResult",
    "aggregate",
    "resolve_splits",
    "run_split",
    "run_experiment",
    "write_results",
    "read_results",
    "results_filename",
]

log = logging.getLogger(__name__)

SETTINGS = ("timed", "convergence", "grid")
DEFAULT_EPOCHS = {"timed": 40, "convergence": 4000, "grid": 4000}
SCHEMA_VERSION = 1
TIMED_DROPOUT = 0.05


class ExperimentError(RuntimeError):
    """A split failed; the experiment is aborted rather than aggregated without it."""


@dataclass(frozen=True)
class ProtocolConfig:
    setting: str = "convergence"
    epochs: int | None = None
    n_splits: int | None = None
    mc_samples: int = DEFAULT_MC_SAMPLES
    master_seed: int = 0
    hidden_units: int | None = None
    test_fraction: float = 0.1
    use_fixed_splits: bool = True
    batch_size: int = 128
    learning_rate: float = 1e-3
    lengthscale: float = DEFAULT_LENGTHSCALE
    # timed setting
    timed_dropout: float = TIMED_DROPOUT
    timed_tau: float | None = None
    # shared by grid and BO
    val_fraction: float = 0.2
    search_mc_samples: int = 1000
    search_epochs: int | None = None
    # grid
    n_tau: int = 10
    tau_span: tuple = TAU_SPAN
    dropout_grid: tuple = DEFAULT_DROPOUT_GRID
    criterion: str = "ll"
    # BO
    bo_init: int = 5
    bo_iters: int = 20
    bo_candidates: int = 2048
    dropout_bounds: tuple = DEFAULT_DROPOUT_BOUNDS

    def __post_init__(self) -> None:
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}; expected one of {SETTINGS}")
        if self.epochs is not None and self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.n_splits is not None and self.n_splits < 1:
            raise ValueError("n_splits must be >= 1")
        if self.mc_samples < 1 or self.search_mc_samples < 1:
            raise ValueError("MC sample counts must be >= 1")
        if self.criterion not in ("ll", "rmse"):
            raise ValueError("criterion must be 'll' or 'rmse'")
        for name in ("tau_span", "dropout_grid", "dropout_bounds"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    def resolve(self, dataset_name: str) -> "ProtocolConfig":
        """Copy with every dataset- and setting-dependent default filled in."""
        epochs = DEFAULT_EPOCHS[self.setting] if self.epochs is None else self.epochs
        return dataclasses.replace(
            self,
            epochs=epochs,
            n_splits=default_n_splits(dataset_name) if self.n_splits is None else self.n_splits,
            hidden_units=default_hidden_units(dataset_name) if self.hidden_units is None else self.hidden_units,
            search_epochs=epochs if self.search_epochs is None else self.search_epochs,
        )

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown protocol keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class SplitRecord:
    split_index: int
    pair: HyperPair
    rmse: float
    mean_log_likelihood: float
    train_wall_time_seconds: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.rmse) and math.isfinite(self.mean_log_likelihood)):
            raise ExperimentError(f"split {self.split_index}: non-finite metrics")
        if self.train_wall_time_seconds < 0:
            raise ExperimentError(f"split {self.split_index}: negative wall time")

    def metrics_dict(self) -> dict:
        return {"split_index": self.split_index, "tau": self.pair.tau, "dropout": self.pair.dropout,
                "rmse": self.rmse, "log_likelihood": self.mean_log_likelihood}


@dataclass(frozen=True)
class Aggregates:
    rmse_mean: float
    rmse_se: float
    ll_mean: float
    ll_se: float
    mean_train_time: float
    n: int


def _mean_se(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


def aggregate(records: Sequence[SplitRecord]) -> Aggregates:
    """Mean and standard error (n-1 sample std over sqrt n) of each metric."""
    if not records:
        raise ValueError("cannot aggregate an empty record list")
    rm, rse = _mean_se([r.rmse for r in records])
    lm, lse = _mean_se([r.mean_log_likelihood for r in records])
    t = float(np.mean([r.train_wall_time_seconds for r in records]))
    return Aggregates(rm, rse, lm, lse, t, len(records))


@dataclass
class ExperimentResult:
    dataset: str
    setting: str
    config: ProtocolConfig
    records: list[SplitRecord]
    aggregates: Aggregates
    metadata: dict = field(default_factory=dict)
    traces: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema": "uci-bdl-results",
            "schema_version": SCHEMA_VERSION,
            "dataset": self.dataset,
            "setting": self.setting,
            "config": self.config.to_dict(),
            "metadata": self.metadata,
            "records": [r.metrics_dict() for r in self.records],
            "timings": [{"split_index": r.split_index, "train_wall_time_seconds": r.train_wall_time_seconds}
                        for r in self.records],
            "aggregates": dataclasses.asdict(self.aggregates),
            "search_traces": self.traces,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentResult":
        if d.get("schema") != "uci-bdl-results":
            raise ValueError("not a results file")
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"results schema version {d.get('schema_version')} != {SCHEMA_VERSION}")
        times = {t["split_index"]: t["train_wall_time_seconds"] for t in d["timings"]}
        records = [SplitRecord(r["split_index"], HyperPair(r["tau"], r["dropout"]), r["rmse"],
                               r["log_likelihood"], times[r["split_index"]]) for r in d["records"]]
        return cls(d["dataset"], d["setting"], ProtocolConfig.from_dict(d["config"]), records,
                   Aggregates(**d["aggregates"]), d.get("metadata", {}), d.get("search_traces", []))


def resolve_splits(dataset: Dataset, cfg: ProtocolConfig, data_dir=None) -> tuple[list[Split], str]:
    """Published split files when present, otherwise seeded random splits."""
    if cfg.use_fixed_splits and data_dir is not None and has_fixed_splits(data_dir, dataset.name):
        splits = load_fixed_splits(dataset, data_dir)
        return splits[:cfg.n_splits], "fixed"
    return generate_splits(dataset, cfg.n_splits, cfg.test_fraction, cfg.master_seed), "seeded"


def _split_seeds(master_seed: int, k: int) -> dict:
    s = np.random.SeedSequence([master_seed, k]).generate_state(4)
    return {"train": int(s[0]), "mc": int(s[1]), "carve": int(s[2]), "search": int(s[3])}


def timed_pair(dataset: Dataset, split: Split, cfg: ProtocolConfig, data_dir=None) -> tuple[HyperPair, str]:
    if cfg.timed_tau is not None:
        return HyperPair(cfg.timed_tau, cfg.timed_dropout), "configured"
    taus = read_grid_file(data_dir, dataset.name, "tau_values") if data_dir is not None else None
    if taus:
        return HyperPair(float(np.median(taus)), cfg.timed_dropout), "grid-file median"
    var = float(np.var(dataset.targets[split.train_indices], ddof=1))
    return HyperPair(1.0 / var, cfg.timed_dropout), "1/var(y_train)"


def run_split(dataset: Dataset, split: Split, k: int, cfg: ProtocolConfig, data_dir=None,
              model_dir=None) -> tuple[SplitRecord, dict]:
    """Tune (per setting), train the final model, and score it on the test rows."""
    seeds = _split_seeds(cfg.master_seed, k)
    mlp = MLPConfig(dataset.n_features, cfg.hidden_units, 0.0, cfg.lengthscale)
    final_tc = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                           seed=seeds["train"])
    search_tc = dataclasses.replace(final_tc, epochs=cfg.search_epochs)
    y_train = dataset.targets[split.train_indices]
    trace: dict = {"split_index": k}
    model = None
    if cfg.setting == "timed":
        pair, source = timed_pair(dataset, split, cfg, data_dir)
        trace["tau_source"] = source
    elif cfg.setting == "grid":
        base = 1.0 / float(np.var(y_train, ddof=1))
        space = SearchSpace(tuple(np.geomspace(cfg.tau_span[0] * base, cfg.tau_span[1] * base, cfg.n_tau)),
                            cfg.dropout_grid)
        res = grid_search(dataset, split, space, mlp, search_tc, cfg.criterion, val_fraction=cfg.val_fraction,
                          seed=seeds["carve"], mc_samples=cfg.search_mc_samples, retrain=False)
        pair = res.best
        trace["entries"] = [r.as_dict() for r in res.table]
    else:
        train_sub, val = carve_validation(split, cfg.val_fraction, seeds["carve"])
        objective = validation_objective(dataset, train_sub.train_indices, val, mlp, search_tc,
                                         cfg.search_mc_samples, seeds["carve"])
        base = 1.0 / float(np.var(y_train, ddof=1))
        bounds = BOBounds((cfg.tau_span[0] * base, cfg.tau_span[1] * base), cfg.dropout_bounds)
        rows = []

        def scored(pair):
            row = objective(pair)
            rows.append(row)
            return row.val_ll if cfg.criterion == "ll" else -row.val_rmse

        res = bo_search(scored, bounds, cfg.bo_init, cfg.bo_iters, seeds["search"],
                        n_candidates=cfg.bo_candidates)
        pair = res.best
        trace["entries"] = [r.as_dict() for r in rows]
    model = fit_model(dataset, split.train_indices, pair, mlp, final_tc)
    X_test, y_test = dataset.features[split.test_indices], dataset.targets[split.test_indices]
    m = evaluate(model, X_test, y_test, pair.tau, cfg.mc_samples, seeds["mc"])
    if model_dir is not None:
        save_model(model, Path(model_dir) / f"{dataset.name}_{cfg.setting}_{cfg.master_seed}_split{k}.model")
    return SplitRecord(k, pair, m.rmse, m.mean_log_likelihood, model.train_wall_time), trace


def _run_split_job(args):
    dataset, split, k, cfg, data_dir, model_dir = args
    try:
        return run_split(dataset, split, k, cfg, data_dir, model_dir)
    except Exception as exc:  # surfaced with split identity by run_experiment
        return exc


def run_experiment(dataset: Dataset, protocol: ProtocolConfig, data_dir=None, jobs: int = 1,
                   model_dir=None, progress=None) -> ExperimentResult:
    """Run every split of one protocol and aggregate the metrics.

    Per-split seeds depend only on ``(master_seed, split_index)``, so results do not
    depend on ``jobs``.  Any failed split aborts the whole experiment.
    """
    cfg = protocol.resolve(dataset.name)
    splits, source = resolve_splits(dataset, cfg, data_dir)
    cfg = dataclasses.replace(cfg, n_splits=len(splits))
    work = [(dataset, sp, k, cfg, data_dir, model_dir) for k, sp in enumerate(splits)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as pool:
            outcomes = list(pool.map(_run_split_job, work))
    else:
        outcomes = []
        for w in work:
            outcomes.append(_run_split_job(w))
            if progress is not None and not isinstance(outcomes[-1], Exception):
                progress(outcomes[-1][0])
    failures = [(k, o) for k, o in enumerate(outcomes) if isinstance(o, Exception)]
    if failures:
        msg = "; ".join(f"split {k}: {type(e).__name__}: {e}" for k, e in failures)
        raise ExperimentError(f"{dataset.name}/{cfg.setting}: {len(failures)} split(s) failed: {msg}")
    records = [o[0] for o in outcomes]
    traces = [o[1] for o in outcomes]
    metadata = {
        "split_source": source,
        "n_rows": dataset.n_rows,
        "n_features": dataset.n_features,
        "source_path": dataset.source_path,
    }
    if cfg.setting == "timed":
        metadata["note"] = ("timed-setting (tau, d) are stand-in defaults; the original tuning of the "
                            "timed baseline is not published")
    return ExperimentResult(dataset.name, cfg.setting, cfg, records, aggregate(records), metadata, traces)


def results_filename(dataset: str, setting: str, seed: int) -> str:
    return f"{dataset}_{setting}_{seed}.results"


def write_results(result: ExperimentResult, out_dir) -> Path:
    """Write the JSON results file and a flat CSV of per-split metrics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / results_filename(result.dataset, result.setting, result.config.master_seed)
    path.write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split_index", "tau", "dropout", "rmse", "log_likelihood", "train_wall_time_seconds"])
        for r in result.records:
            w.writerow([r.split_index, repr(r.pair.tau), repr(r.pair.dropout), repr(r.rmse),
                        repr(r.mean_log_likelihood), repr(r.train_wall_time_seconds)])
    if result.setting != "timed":
        # Winning (tau, d) per split, one value per line, in the layout of the published grid files.
        stem = path.with_suffix("")
        Path(f"{stem}_tau_values.txt").write_text("".join(f"{r.pair.tau!r}\n" for r in result.records))
        Path(f"{stem}_dropout_rates.txt").write_text("".join(f"{r.pair.dropout!r}\n" for r in result.records))
    return path


def read_results(path) -> ExperimentResult:
    return ExperimentResult.from_dict(json.loads(Path(path).read_text()))


def available_parallelism() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1
