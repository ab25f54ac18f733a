"""Command line entry point: ``uci-bdl {data,run,report,reproduce}``.

Exit codes: 0 success, 1 a compared cell failed, 2 usage error, 3 runtime or data error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import datasets as ds
from .report import METRICS, compare_to_reference, load_reference, render_table
from .runner import (
    ExperimentError,
    ProtocolConfig,
    available_parallelism,
    read_results,
    run_experiment,
    write_results,
)

EXIT_OK, EXIT_COMPARE_FAIL, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3
DATA_DIR_ENV = "UCI_BDL_DATA_DIR"

SETTING_ALIASES = {"timed": "timed", "convergence": "convergence", "grid": "grid"}

# Reduced budget for a quick reproduction on a laptop; epochs stay at the protocol values.
DESK_BUDGET = dict(n_splits=10, mc_samples=1000, search_mc_samples=200, bo_init=4, bo_iters=6,
                   n_tau=5, dropout_grid=(0.01, 0.05, 0.1))

log = logging.getLogger("uci_bdl")


class UsageError(Exception):
    pass


def _default_data_dir() -> str:
    return os.environ.get(DATA_DIR_ENV, "data/UCI")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file whose keys mirror the flags")
    p.add_argument("--data-dir", default=None, help=f"dataset root (default: ${DATA_DIR_ENV} or data/UCI)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uci-bdl", description="MC-dropout UCI regression benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("data", help="list or inspect datasets, print download sources")
    p.add_argument("action", choices=["list", "inspect", "fetch-instructions"])
    p.add_argument("--dataset", default=None)
    _add_common(p)

    p = sub.add_parser("run", help="run one protocol on one dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--setting", choices=sorted(SETTING_ALIASES), default="convergence")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--splits", type=int, default=None)
    p.add_argument("--mc-samples", type=int, default=10_000)
    p.add_argument("--search-mc-samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden-units", type=int, default=None)
    p.add_argument("--criterion", choices=["ll", "rmse"], default="ll")
    p.add_argument("--n-tau", type=int, default=10)
    p.add_argument("--bo-init", type=int, default=5)
    p.add_argument("--bo-iters", type=int, default=20)
    p.add_argument("--timed-tau", type=float, default=None)
    p.add_argument("--no-fixed-splits", action="store_true")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--out", default="results")
    p.add_argument("--save-models", action="store_true")
    _add_common(p)

    p = sub.add_parser("report", help="render result tables and compare with the published cells")
    p.add_argument("--results", nargs="*", default=[])
    p.add_argument("--format", choices=["markdown", "csv", "latex"], default="markdown")
    p.add_argument("--metric", choices=list(METRICS) + ["both"], default="both")
    p.add_argument("--compare-k", type=float, default=None)
    p.add_argument("--ll-se-floor", type=float, default=0.0)
    p.add_argument("--no-reference", action="store_true")
    _add_common(p)

    p = sub.add_parser("reproduce", help="run convergence, grid and timed protocols and compare")
    p.add_argument("--datasets", nargs="+", choices=list(ds.DATASETS), default=["bostonHousing", "concrete",
                                                                               "wine-quality-red", "yacht"])
    p.add_argument("--budget", choices=["full", "desk"], default="desk")
    p.add_argument("--settings", nargs="+", choices=sorted(SETTING_ALIASES),
                   default=["convergence", "grid", "timed"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--out", default="results")
    p.add_argument("--compare-k", type=float, default=3.0)
    p.add_argument("--epochs", type=int, default=None, help="override every setting's epoch count (smoke runs)")
    p.add_argument("--splits", type=int, default=None, help="override the budget's split count")
    _add_common(p)
    return parser


def _read_config_file(path: str) -> dict:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        values[k.replace("-", "_")] = v
    return values


def _apply_config(sub: argparse.ArgumentParser, values: dict) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    defaults = {}
    for key, raw in values.items():
        a = actions[key]
        if isinstance(a, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        elif a.nargs in ("*", "+"):
            defaults[key] = [a.type(x) if a.type else x for x in raw.replace(",", " ").split()]
        else:
            try:
                defaults[key] = a.type(raw) if a.type else raw
            except ValueError:
                raise UsageError(f"config key {key}: invalid value {raw!r}") from None
        if a.choices is not None:
            vals = defaults[key] if isinstance(defaults[key], list) else [defaults[key]]
            bad = [v for v in vals if v not in a.choices]
            if bad:
                raise UsageError(f"config key {key}: invalid choice {bad[0]!r}")
    sub.set_defaults(**defaults)


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(sub, _read_config_file(args.config))
        args = parser.parse_args(argv)
    if args.data_dir is None:
        args.data_dir = _default_data_dir()
    return args


def cmd_data(args) -> int:
    root = Path(args.data_dir)
    if args.action == "fetch-instructions":
        print(f"# No files are downloaded by this tool. Place each table under {root}/<name>/data/.")
        print(f"# Published split and index files: {ds.SPLITS_REPOSITORY}")
        for name in ds.DATASETS:
            print(f"{name}\t{ds.SOURCE_URLS[name]}")
        return EXIT_OK
    names = [args.dataset] if args.dataset else ds.list_datasets(root)
    for name in names:
        d = ds.load_dataset(root, name)
        splits = "fixed-splits" if ds.has_fixed_splits(root, name) else "seeded-splits"
        print(f"{name}\tn_rows={d.n_rows}\tn_features={d.n_features}\t{splits}")
    return EXIT_OK


def _protocol_from_run_args(args) -> ProtocolConfig:
    return ProtocolConfig(
        setting=SETTING_ALIASES[args.setting], epochs=args.epochs, n_splits=args.splits,
        mc_samples=args.mc_samples, search_mc_samples=args.search_mc_samples, master_seed=args.seed,
        hidden_units=args.hidden_units, criterion=args.criterion, n_tau=args.n_tau, bo_init=args.bo_init,
        bo_iters=args.bo_iters, timed_tau=args.timed_tau, use_fixed_splits=not args.no_fixed_splits,
    )


def _aggregate_line(res) -> str:
    a = res.aggregates
    return (f"{res.dataset}\t{res.setting}\tRMSE {a.rmse_mean:.4f} ± {a.rmse_se:.4f}\t"
            f"LL {a.ll_mean:.4f} ± {a.ll_se:.4f}\ttrain time {a.mean_train_time:.3f}s\tsplits {a.n}")


def _jobs(args) -> int:
    return args.jobs if args.jobs is not None else available_parallelism()


def cmd_run(args) -> int:
    if args.dataset not in ds.DATASETS and not (Path(args.data_dir) / args.dataset).is_dir():
        raise UsageError(f"unknown dataset {args.dataset!r}")
    dataset = ds.load_dataset(args.data_dir, args.dataset)
    protocol = _protocol_from_run_args(args)
    model_dir = None
    if args.save_models:
        model_dir = Path(args.out) / "models"
        model_dir.mkdir(parents=True, exist_ok=True)
    res = run_experiment(dataset, protocol, args.data_dir, jobs=_jobs(args), model_dir=model_dir)
    path = write_results(res, args.out)
    print(_aggregate_line(res))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    results = [read_results(p) for p in args.results]
    reference = None if args.no_reference else load_reference()
    metrics = list(METRICS) if args.metric == "both" else [args.metric]
    for metric in metrics:
        print(render_table(results, reference, args.format, metric))
    if args.compare_k is None:
        return EXIT_OK
    if reference is None:
        raise UsageError("--compare-k needs the reference table")
    failed = False
    for res in results:
        for v in compare_to_reference(res, reference, args.compare_k, metrics, {"ll": args.ll_se_floor}):
            print(v.line())
            failed |= not v.passed
    return EXIT_COMPARE_FAIL if failed else EXIT_OK


def cmd_reproduce(args) -> int:
    reference = load_reference()
    budget = dict(DESK_BUDGET) if args.budget == "desk" else {}
    if args.splits is not None:
        budget["n_splits"] = args.splits
    loaded = {name: ds.load_dataset(args.data_dir, name) for name in args.datasets}
    failing = []
    results = []
    for name, dataset in loaded.items():
        for setting in args.settings:
            protocol = ProtocolConfig(setting=setting, master_seed=args.seed, epochs=args.epochs, **budget)
            res = run_experiment(dataset, protocol, args.data_dir, jobs=_jobs(args))
            write_results(res, args.out)
            results.append(res)
            print(_aggregate_line(res), flush=True)
            for v in compare_to_reference(res, reference, args.compare_k):
                print("  " + v.line(), flush=True)
                if not v.passed and setting != "timed":
                    failing.append(v.cell_id)
    for metric in METRICS:
        print(render_table(results, reference, "markdown", metric))
    if failing:
        print("failing cells: " + ", ".join(failing))
        return EXIT_COMPARE_FAIL
    print("all compared cells within tolerance")
    return EXIT_OK


COMMANDS = {"data": cmd_data, "run": cmd_run, "report": cmd_report, "reproduce": cmd_reproduce}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"uci-bdl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"uci-bdl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ds.DatasetError, ExperimentError, ValueError, KeyError, OSError) as exc:
        print(f"uci-bdl: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
