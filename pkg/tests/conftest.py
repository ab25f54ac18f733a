import sys
from pathlib import Path

import numpy as np
import pytest

from uci_bdl.datasets import Dataset

REPO = Path(__file__).resolve().parents[1]
DATA_DIR = REPO / "data" / "UCI"


def toy_dataset(n=60, d=3, noise=0.0, seed=0, name="toy", nonlinear=False):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    w = np.arange(1, d + 1, dtype=float)
    y = X @ w + 0.5
    if nonlinear:
        y = y + np.sin(2 * X[:, 0]) * 2
    y = y + noise * rng.normal(size=n)
    return Dataset(name, X, y, "<synthetic>")


def write_layout(root: Path, name: str, table: np.ndarray, features=None, target=None):
    d = root / name / "data"
    d.mkdir(parents=True)
    np.savetxt(d / "data.txt", table)
    n_cols = table.shape[1]
    features = range(n_cols - 1) if features is None else features
    target = n_cols - 1 if target is None else target
    (d / "index_features.txt").write_text("".join(f"{i}\n" for i in features))
    (d / "index_target.txt").write_text(f"{target}\n")
    return d


@pytest.fixture
def toy():
    return toy_dataset()


@pytest.fixture
def data_dir():
    return DATA_DIR


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
