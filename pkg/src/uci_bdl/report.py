"""Result tables in the published layout, and comparison against the published cells."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Sequence

from .datasets import DATASETS, DISPLAY_NAMES
from .runner import ExperimentResult

__all__ = [
    "METRICS",
    "SETTING_COLUMNS",
    "Cell",
    "ReferenceTable",
    "TableModel",
    "ComparisonVerdict",
    "load_reference",
    "format_cell",
    "build_table",
    "format_table",
    "parse_csv",
    "render_table",
    "compare_to_reference",
]

METRICS = ("rmse", "ll")
METRIC_TITLES = {"rmse": "Average RMSE test performance", "ll": "Average log likelihood test performance"}
SETTING_COLUMNS = {
    "timed": "Dropout (Timed Setting)",
    "convergence": "Dropout (Convergence)",
    "grid": "Dropout (Hyperparameter tuning)",
}
SE_FLOOR = 1e-12


@dataclass(frozen=True)
class Cell:
    mean: float
    se: float


class ReferenceTable:
    """Published mean/SE cells keyed by metric, dataset and column; absent cells are ``None``."""

    def __init__(self, columns: dict, tables: dict, version: int = 1):
        self.columns = {m: list(c) for m, c in columns.items()}
        self.version = version
        self._cells = {}
        for metric, rows in tables.items():
            for ds, row in rows.items():
                for col in self.columns[metric]:
                    v = row.get(col)
                    if v is not None and v["se"] < 0:
                        raise ValueError(f"negative SE in reference cell {metric}/{ds}/{col}")
                    self._cells[metric, ds, col] = None if v is None else Cell(float(v["mean"]), float(v["se"]))

    @property
    def datasets(self) -> list[str]:
        seen = {ds for (_, ds, _) in self._cells}
        return [d for d in DATASETS if d in seen]

    def has(self, metric: str, dataset: str, column: str) -> bool:
        return (metric, dataset, column) in self._cells

    def cell(self, metric: str, dataset: str, column: str) -> Cell | None:
        try:
            return self._cells[metric, dataset, column]
        except KeyError:
            raise KeyError(f"no reference cell {metric}/{dataset}/{column}") from None


def load_reference() -> ReferenceTable:
    text = resources.files("uci_bdl").joinpath("data/reference_tables.json").read_text()
    doc = json.loads(text)
    if doc.get("schema") != "uci-bdl-reference":
        raise ValueError("not a reference table file")
    return ReferenceTable(doc["columns"], doc["tables"], doc["schema_version"])


def format_cell(cell: Cell | None, decimals: int = 2) -> str:
    if cell is None:
        return "--"
    return f"{cell.mean:.{decimals}f} ± {cell.se:.{decimals}f}"


@dataclass
class TableModel:
    metric: str
    columns: list[str]
    rows: dict  # dataset -> {column: Cell | None}


def _result_column(res: ExperimentResult, taken: set) -> str:
    label = f"Ours: {SETTING_COLUMNS.get(res.setting, res.setting)}"
    if label in taken:
        label = f"{label} [seed {res.config.master_seed}]"
    return label


def build_table(results: Sequence[ExperimentResult], reference: ReferenceTable | None, metric: str) -> TableModel:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    columns = list(reference.columns[metric]) if reference is not None else []
    rows: dict = {}
    if reference is not None:
        for ds in reference.datasets:
            rows[ds] = {c: reference.cell(metric, ds, c) for c in columns}
    labels = {}
    for res in results:
        key = (res.setting, res.config.master_seed)
        if key not in labels:
            labels[key] = _result_column(res, set(labels.values()))
            columns.append(labels[key])
        a = res.aggregates
        cell = Cell(a.rmse_mean, a.rmse_se) if metric == "rmse" else Cell(a.ll_mean, a.ll_se)
        rows.setdefault(res.dataset, {})[labels[key]] = cell
    order = [d for d in DATASETS if d in rows] + sorted(d for d in rows if d not in DATASETS)
    return TableModel(metric, columns, {d: {c: rows[d].get(c) for c in columns} for d in order})


def _best_columns(model: TableModel, row: dict) -> set:
    shown = {c: round(cell.mean, 2) for c, cell in row.items() if cell is not None}
    if not shown:
        return set()
    target = min(shown.values()) if model.metric == "rmse" else max(shown.values())
    return {c for c, v in shown.items() if v == target}


def format_table(model: TableModel, fmt: str = "markdown") -> str:
    """Render a table model as ``markdown``, ``latex`` or ``csv``.

    Markdown and LaTeX show two decimals and bold every cell tied at the best
    displayed mean (lowest RMSE, highest log-likelihood).  CSV is long-format and
    keeps full precision.
    """
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "dataset", "source", "mean", "se"])
        for ds, row in model.rows.items():
            for col in model.columns:
                cell = row.get(col)
                w.writerow([model.metric, ds, col, "" if cell is None else repr(cell.mean),
                            "" if cell is None else repr(cell.se)])
        return buf.getvalue()
    if fmt == "markdown":
        lines = [f"**{METRIC_TITLES[model.metric]}.**", "",
                 "| Dataset | " + " | ".join(model.columns) + " |",
                 "|---" * (len(model.columns) + 1) + "|"]
        for ds, row in model.rows.items():
            best = _best_columns(model, row)
            cells = []
            for col in model.columns:
                text = format_cell(row.get(col))
                cells.append(f"**{text}**" if col in best else text)
            lines.append(f"| {DISPLAY_NAMES.get(ds, ds)} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"
    if fmt == "latex":
        lines = ["\\begin{tabular}{c|" + "|".join("c" * len(model.columns)) + "}", "\\toprule",
                 "\\textbf{Dataset} & " + " & ".join(f"\\textbf{{{c}}}" for c in model.columns) + " \\\\",
                 "\\hline"]
        for ds, row in model.rows.items():
            best = _best_columns(model, row)
            cells = []
            for col in model.columns:
                cell = row.get(col)
                if cell is None:
                    cells.append("$--$")
                    continue
                body = f"{cell.mean:.2f} \\pm {cell.se:.2f}"
                cells.append(f"$\\bm{{{body}}}$" if col in best else f"${body}$")
            lines.append(f"{DISPLAY_NAMES.get(ds, ds)} & " + " & ".join(cells) + " \\\\")
        lines += ["\\bottomrule", "\\end{tabular}"]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown table format {fmt!r}")


def parse_csv(text: str) -> TableModel:
    """Inverse of ``format_table(..., "csv")``."""
    reader = csv.DictReader(io.StringIO(text))
    metric = None
    columns: list[str] = []
    rows: dict = {}
    for r in reader:
        metric = r["metric"]
        if r["source"] not in columns:
            columns.append(r["source"])
        cell = None if r["mean"] == "" else Cell(float(r["mean"]), float(r["se"]))
        rows.setdefault(r["dataset"], {})[r["source"]] = cell
    if metric is None:
        raise ValueError("empty table CSV")
    return TableModel(metric, columns, {d: {c: row.get(c) for c in columns} for d, row in rows.items()})


def render_table(results: Sequence[ExperimentResult], reference: ReferenceTable | None,
                 fmt: str = "markdown", metric: str = "rmse") -> str:
    if fmt not in ("markdown", "csv", "latex"):
        raise ValueError(f"unknown table format {fmt!r}")
    if not results and reference is None:
        raise ValueError("nothing to render")
    return format_table(build_table(results, reference, metric), fmt)


@dataclass(frozen=True)
class ComparisonVerdict:
    dataset: str
    column: str
    metric: str
    ours: Cell
    reference: Cell
    deviation: float
    k: float
    passed: bool

    @property
    def cell_id(self) -> str:
        return f"{self.metric}/{self.dataset}/{self.column}"

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.cell_id}: ours {self.ours.mean:.4f} ± {self.ours.se:.4f} vs "
                f"reference {format_cell(self.reference)} -> {self.deviation:.2f} SE (k={self.k:g})")


def deviation(ours: Cell, ref: Cell, se_floor: float = SE_FLOOR) -> float:
    return abs(ours.mean - ref.mean) / max(ref.se, ours.se, se_floor)


def compare_to_reference(result: ExperimentResult, reference: ReferenceTable, k: float = 3.0,
                         metrics: Iterable[str] = METRICS, se_floor: dict | float = SE_FLOOR) -> list[ComparisonVerdict]:
    """Gate each metric at ``|ours - ref| <= k * max(SE_ref, SE_ours, floor)``.

    ``se_floor`` may be a per-metric mapping, e.g. ``{"ll": 0.05}``.
    """
    column = SETTING_COLUMNS[result.setting]
    a = result.aggregates
    verdicts = []
    for metric in metrics:
        ref = reference.cell(metric, result.dataset, column)
        if ref is None:
            raise KeyError(f"reference cell {metric}/{result.dataset}/{column} is absent")
        ours = Cell(a.rmse_mean, a.rmse_se) if metric == "rmse" else Cell(a.ll_mean, a.ll_se)
        floor = se_floor.get(metric, SE_FLOOR) if isinstance(se_floor, dict) else se_floor
        dev = deviation(ours, ref, max(floor, SE_FLOOR))
        verdicts.append(ComparisonVerdict(result.dataset, column, metric, ours, ref, dev, k, dev <= k))
    return verdicts
