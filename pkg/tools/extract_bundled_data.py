"""Rebuild ``data/UCI`` from data tables shipped inside third-party archives.

The benchmark tables are redistributed by several packages.  This script reads
the locally downloaded archives (no network access) and writes them in the
``<name>/data/{data.txt,index_features.txt,index_target.txt}`` layout.

    pip download scikit-learn==1.1.3 rdatasets==0.2.10 --no-deps -d /tmp/wheels
    cargo fetch  # with linfa-datasets = { version = "0.8", features = ["winequality"] }
    python tools/extract_bundled_data.py --wheels /tmp/wheels \
        --linfa ~/.cargo/registry/src/*/linfa-datasets-0.8.1 --out data/UCI
"""

import argparse
import csv
import gzip
import io
import lzma
import pickle
import zipfile
from pathlib import Path

import numpy as np


def _write(out: Path, name: str, table: np.ndarray) -> None:
    d = out / name / "data"
    d.mkdir(parents=True, exist_ok=True)
    np.savetxt(d / "data.txt", table, fmt="%.10g", delimiter=" ")
    n_cols = table.shape[1]
    (d / "index_features.txt").write_text("".join(f"{i}\n" for i in range(n_cols - 1)))
    (d / "index_target.txt").write_text(f"{n_cols - 1}\n")
    print(f"{name}: {table.shape[0]} rows x {n_cols} columns")


def boston(wheels: Path) -> np.ndarray:
    whl = next(wheels.glob("scikit_learn-1.1.3-*.whl"))
    text = zipfile.ZipFile(whl).read("sklearn/datasets/data/boston_house_prices.csv").decode()
    rows = list(csv.reader(io.StringIO(text)))[2:]
    return np.array([[float(v) for v in r] for r in rows if r])


def concrete(wheels: Path) -> np.ndarray:
    whl = next(wheels.glob("rdatasets-*.whl"))
    blob = zipfile.ZipFile(whl).read("rdatasets/_data/modeldata/concrete.pkl.compress")
    df = pickle.loads(lzma.decompress(blob))
    return df.drop(columns=["rownames"]).to_numpy(dtype=float)


def wine_red(linfa: Path) -> np.ndarray:
    with gzip.open(linfa / "data" / "winequality-red.csv.gz", "rt") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in r] for r in rows if r])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--wheels", type=Path, required=True)
    ap.add_argument("--linfa", type=Path, required=True)
    ap.add_argument("--out", type=Path, default=Path("data/UCI"))
    args = ap.parse_args()
    _write(args.out, "bostonHousing", boston(args.wheels))
    _write(args.out, "concrete", concrete(args.wheels))
    _write(args.out, "wine-quality-red", wine_red(args.linfa))


if __name__ == "__main__":
    main()
