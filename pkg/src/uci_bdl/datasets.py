"""UCI regression datasets: loading, train/test splits and standardization.

A dataset lives in a directory laid out as::

    <name>/data/data.txt             whitespace- or comma-delimited numeric table
    <name>/data/index_features.txt   0-based feature column indices, one per line
    <name>/data/index_target.txt     0-based target column index
    <name>/data/n_splits.txt         optional, number of published splits
    <name>/data/index_train_<k>.txt  optional, 0-based row indices
    <name>/data/index_test_<k>.txt
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "DATASETS",
    "DISPLAY_NAMES",
    "DatasetError",
    "Dataset",
    "Split",
    "Standardizer",
    "load_dataset",
    "find_dataset_dir",
    "list_datasets",
    "generate_splits",
    "load_fixed_splits",
    "has_fixed_splits",
    "carve_validation",
    "fit_standardizer",
    "apply_standardizer",
    "invert_targets",
    "default_n_splits",
    "default_hidden_units",
    "read_grid_file",
]

# Directory names used by the published experiment repository.
DATASETS = (
    "bostonHousing",
    "concrete",
    "energy",
    "kin8nm",
    "naval-propulsion-plant",
    "power-plant",
    "protein-tertiary-structure",
    "wine-quality-red",
    "yacht",
)

DISPLAY_NAMES = {
    "bostonHousing": "Boston Housing",
    "concrete": "Concrete Strength",
    "energy": "Energy Efficiency",
    "kin8nm": "Kin8nm",
    "naval-propulsion-plant": "Naval Propulsion",
    "power-plant": "Power Plant",
    "protein-tertiary-structure": "Protein Structure",
    "wine-quality-red": "Wine Quality Red",
    "yacht": "Yacht Hydrodynamics",
}

PROTEIN = "protein-tertiary-structure"

# Where the raw tables can be obtained; printed by ``uci-bdl data fetch-instructions``.
SOURCE_URLS = {
    "bostonHousing": "https://archive.ics.uci.edu/ml/machine-learning-databases/housing/housing.data",
    "concrete": "https://archive.ics.uci.edu/ml/machine-learning-databases/concrete/compressive/Concrete_Data.xls",
    "energy": "https://archive.ics.uci.edu/ml/machine-learning-databases/00242/ENB2012_data.xlsx",
    "kin8nm": "https://www.openml.org/d/189",
    "naval-propulsion-plant": "https://archive.ics.uci.edu/ml/machine-learning-databases/00316/UCI%20CBM%20Dataset.zip",
    "power-plant": "https://archive.ics.uci.edu/ml/machine-learning-databases/00294/CCPP.zip",
    "protein-tertiary-structure": "https://archive.ics.uci.edu/ml/machine-learning-databases/00265/CASP.csv",
    "wine-quality-red": "https://archive.ics.uci.edu/ml/machine-learning-databases/wine-quality/winequality-red.csv",
    "yacht": "https://archive.ics.uci.edu/ml/machine-learning-databases/00243/yacht_hydrodynamics.data",
}
SPLITS_REPOSITORY = "https://github.com/yaringal/DropoutUncertaintyExps/tree/master/UCI_Datasets"


class DatasetError(ValueError):
    """Raised for malformed dataset files or invalid split requests."""


@dataclass(frozen=True)
class Dataset:
    name: str
    features: np.ndarray
    targets: np.ndarray
    source_path: str = ""

    def __post_init__(self) -> None:
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
            raise DatasetError(f"{self.name}: features must be a non-empty 2-D array, got {X.shape}")
        if y.shape[0] != X.shape[0]:
            raise DatasetError(f"{self.name}: {y.shape[0]} targets for {X.shape[0]} rows")
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise DatasetError(f"{self.name}: non-finite values")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Split:
    train_indices: np.ndarray
    test_indices: np.ndarray

    def __post_init__(self) -> None:
        tr = np.asarray(self.train_indices, dtype=np.int64).reshape(-1)
        te = np.asarray(self.test_indices, dtype=np.int64).reshape(-1)
        if tr.size == 0 or te.size == 0:
            raise DatasetError("train and test index lists must be non-empty")
        if np.unique(tr).size != tr.size or np.unique(te).size != te.size:
            raise DatasetError("duplicate indices within a split")
        if np.intersect1d(tr, te).size:
            raise DatasetError("train and test indices overlap")
        if min(tr.min(), te.min()) < 0:
            raise DatasetError("negative row index")
        tr.setflags(write=False)
        te.setflags(write=False)
        object.__setattr__(self, "train_indices", tr)
        object.__setattr__(self, "test_indices", te)

    def validate_for(self, n_rows: int) -> "Split":
        if max(self.train_indices.max(), self.test_indices.max()) >= n_rows:
            raise DatasetError(f"row index out of range for a dataset of {n_rows} rows")
        return self


@dataclass(frozen=True)
class Standardizer:
    feature_means: np.ndarray
    feature_stds: np.ndarray
    target_mean: float
    target_std: float

    @property
    def n_features(self) -> int:
        return self.feature_means.shape[0]


def _read_table(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    rows = []
    width = None
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        cells = line.replace(",", " ").split()
        try:
            values = [float(c) for c in cells]
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
        if width is None:
            width = len(values)
        elif len(values) != width:
            raise DatasetError(f"{path}:{lineno}: ragged row ({len(values)} cells, expected {width})")
        rows.append(values)
    if not rows:
        raise DatasetError(f"{path}: empty table")
    table = np.array(rows, dtype=np.float64)
    if not np.isfinite(table).all():
        raise DatasetError(f"{path}: non-finite values")
    return table


def _read_indices(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    try:
        vals = [float(tok) for tok in path.read_text().split()]
    except ValueError:
        raise DatasetError(f"{path}: non-numeric index") from None
    idx = np.array(vals, dtype=np.float64)
    if idx.size and not np.all(idx == np.round(idx)):
        raise DatasetError(f"{path}: indices must be integers")
    return idx.astype(np.int64)


def find_dataset_dir(dir_path: str | Path, name: str) -> Path:
    """Return the ``data/`` directory of ``name`` below ``dir_path``.

    ``dir_path`` may be the root holding many datasets or the dataset directory itself.
    """
    root = Path(dir_path)
    for cand in (root / name / "data", root / "data", root):
        if (cand / "data.txt").is_file():
            return cand
    raise DatasetError(f"dataset {name!r} not found under {root}")


def list_datasets(dir_path: str | Path) -> list[str]:
    root = Path(dir_path)
    if not root.is_dir():
        raise DatasetError(f"missing directory: {root}")
    return sorted(p.parent.parent.name for p in root.glob("*/data/data.txt"))


def load_dataset(dir_path: str | Path, name: str) -> Dataset:
    """Load the named dataset, selecting columns per the index files."""
    d = find_dataset_dir(dir_path, name)
    table = _read_table(d / "data.txt")
    feat = _read_indices(d / "index_features.txt")
    targ = _read_indices(d / "index_target.txt")
    if feat.size == 0 or targ.size != 1:
        raise DatasetError(f"{d}: need >= 1 feature column and exactly one target column")
    n_cols = table.shape[1]
    if max(feat.max(), targ.max()) >= n_cols or min(feat.min(), targ.min()) < 0:
        raise DatasetError(f"{d}: column index out of range for {n_cols} columns")
    return Dataset(name=name, features=table[:, feat], targets=table[:, int(targ[0])],
                   source_path=str(d / "data.txt"))


def default_n_splits(name: str) -> int:
    return 5 if name == PROTEIN else 20


def default_hidden_units(name: str) -> int:
    return 100 if name == PROTEIN else 50


def generate_splits(dataset: Dataset, n_splits: int, test_fraction: float = 0.1,
                    seed: int = 0) -> list[Split]:
    """Seeded random train/test partitions with ``round(test_fraction * n)`` test rows each."""
    n = dataset.n_rows
    if not 0.0 < test_fraction < 1.0:
        raise DatasetError("test_fraction must lie in (0, 1)")
    if math.floor(test_fraction * n) < 1:
        raise DatasetError(f"{n} rows are too few for test_fraction={test_fraction}")
    n_test = int(math.floor(test_fraction * n + 0.5))
    if n_test >= n:
        raise DatasetError("test set would consume every row")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    splits = []
    for _ in range(n_splits):
        perm = rng.permutation(n)
        splits.append(Split(np.sort(perm[n_test:]), np.sort(perm[:n_test])))
    return splits


def has_fixed_splits(dir_path: str | Path, name: str | None = None) -> bool:
    try:
        d = find_dataset_dir(dir_path, name or "")
    except DatasetError:
        return False
    return (d / "index_train_0.txt").is_file()


def load_fixed_splits(dataset: Dataset, dir_path: str | Path) -> list[Split]:
    """Read published ``index_train_<k>.txt``/``index_test_<k>.txt`` files."""
    d = find_dataset_dir(dir_path, dataset.name)
    if (d / "n_splits.txt").is_file():
        n_splits = int(_read_indices(d / "n_splits.txt")[0])
    else:
        n_splits = 0
        while (d / f"index_train_{n_splits}.txt").is_file():
            n_splits += 1
    if n_splits == 0:
        raise DatasetError(f"{d}: no split index files")
    splits = []
    for k in range(n_splits):
        sp = Split(_read_indices(d / f"index_train_{k}.txt"), _read_indices(d / f"index_test_{k}.txt"))
        splits.append(sp.validate_for(dataset.n_rows))
    return splits


def carve_validation(split: Split, fraction: float = 0.2, seed: int = 0) -> tuple[Split, np.ndarray]:
    """Hold out ``round(fraction * |train|)`` training rows as a validation set.

    Returns a split whose train part is the remainder (test part unchanged) and the
    validation indices.
    """
    train = split.train_indices
    if not 0.0 < fraction < 1.0:
        raise DatasetError("validation fraction must lie in (0, 1)")
    if train.size < 5:
        raise DatasetError(f"training set of {train.size} rows is too small to carve validation")
    n_val = int(math.floor(fraction * train.size + 0.5))
    if n_val == 0 or n_val >= train.size:
        raise DatasetError(f"validation fraction {fraction} gives {n_val} of {train.size} rows")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCA7]))
    perm = rng.permutation(train.size)
    val = np.sort(train[perm[:n_val]])
    rest = np.sort(train[perm[n_val:]])
    return Split(rest, split.test_indices), val


def fit_standardizer(dataset: Dataset, train_indices: Sequence[int] | np.ndarray) -> Standardizer:
    """Column means and sample standard deviations over the training rows only."""
    idx = np.asarray(train_indices, dtype=np.int64)
    if idx.size < 2:
        raise DatasetError("need at least two training rows to standardize")
    X = dataset.features[idx]
    y = dataset.targets[idx]
    stds = X.std(axis=0, ddof=1)
    # Constant columns would divide by zero.
    stds = np.where(stds > 0, stds, 1.0)
    t_std = float(y.std(ddof=1))
    return Standardizer(X.mean(axis=0), stds, float(y.mean()), t_std if t_std > 0 else 1.0)


def apply_standardizer(s: Standardizer, X: np.ndarray, y: np.ndarray | None = None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != s.n_features:
        raise DatasetError(f"expected {s.n_features} feature columns, got shape {X.shape}")
    Xs = (X - s.feature_means) / s.feature_stds
    if y is None:
        return Xs, None
    return Xs, (np.asarray(y, dtype=np.float64) - s.target_mean) / s.target_std


def invert_targets(s: Standardizer, y: np.ndarray) -> np.ndarray:
    return np.asarray(y, dtype=np.float64) * s.target_std + s.target_mean


def read_grid_file(dir_path: str | Path, name: str, kind: str) -> list[float] | None:
    """Read ``tau_values.txt`` or ``dropout_rates.txt`` next to the data, if present."""
    try:
        d = find_dataset_dir(dir_path, name)
    except DatasetError:
        return None
    path = d / f"{kind}.txt"
    if not path.is_file():
        return None
    return [float(v) for v in path.read_text().split()]
