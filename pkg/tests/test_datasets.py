import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uci_bdl import datasets as ds
from uci_bdl.datasets import Dataset, DatasetError, Split

from conftest import DATA_DIR, toy_dataset, write_layout


def test_load_three_row_file(tmp_path):
    table = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]])
    write_layout(tmp_path, "tiny", table, features=[0, 1], target=2)
    d = ds.load_dataset(tmp_path, "tiny")
    assert d.features.shape == (3, 2)
    np.testing.assert_array_equal(d.targets, [3.0, 6.0, 9.0])
    np.testing.assert_array_equal(d.features, table[:, :2])


def test_load_comma_delimited(tmp_path):
    d = tmp_path / "c" / "data"
    d.mkdir(parents=True)
    (d / "data.txt").write_text("1,2,3\n4,5,6\n")
    (d / "index_features.txt").write_text("0\n1\n")
    (d / "index_target.txt").write_text("2\n")
    assert ds.load_dataset(tmp_path, "c").n_rows == 2


def test_boston_dimensions_match_line_count_oracle():
    path = DATA_DIR / "bostonHousing" / "data" / "data.txt"
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip()]
    n_cols = len(lines[0].split())
    n_feat = len(open(path.parent / "index_features.txt").read().split())
    d = ds.load_dataset(DATA_DIR, "bostonHousing")
    assert d.n_rows == len(lines) == 506
    assert d.n_features == n_feat == n_cols - 1 == 13


def test_large_table_shape(tmp_path):
    # Same shape contract as YearPredictionMSD (515345 x 90) at reduced row count.
    rng = np.random.default_rng(1)
    write_layout(tmp_path, "year", rng.normal(size=(50, 91)), features=range(1, 91), target=0)
    assert ds.load_dataset(tmp_path, "year").n_features == 90


@pytest.mark.parametrize("content,msg", [
    ("1 2 3\n4 5\n", "ragged"),
    ("1 2 x\n4 5 6\n", "non-numeric"),
    ("1 2 nan\n4 5 6\n", "non-finite"),
    ("", "empty"),
])
def test_malformed_tables(tmp_path, content, msg):
    d = tmp_path / "bad" / "data"
    d.mkdir(parents=True)
    (d / "data.txt").write_text(content)
    (d / "index_features.txt").write_text("0\n1\n")
    (d / "index_target.txt").write_text("2\n")
    with pytest.raises(DatasetError, match=msg):
        ds.load_dataset(tmp_path, "bad")


def test_missing_index_file(tmp_path):
    d = write_layout(tmp_path, "m", np.ones((3, 3)))
    (d / "index_target.txt").unlink()
    with pytest.raises(DatasetError, match="missing file"):
        ds.load_dataset(tmp_path, "m")


def test_empty_selection(tmp_path):
    d = write_layout(tmp_path, "e", np.ones((3, 3)))
    (d / "index_features.txt").write_text("")
    with pytest.raises(DatasetError):
        ds.load_dataset(tmp_path, "e")


def test_missing_directory():
    with pytest.raises(DatasetError):
        ds.load_dataset("/nonexistent/dir", "bostonHousing")


def test_split_sizes_n10():
    splits = ds.generate_splits(toy_dataset(n=10), 5, 0.1, seed=3)
    assert len(splits) == 5
    for sp in splits:
        assert sp.test_indices.size == 1 and sp.train_indices.size == 9


def test_splits_deterministic():
    d = toy_dataset(n=50)
    a = ds.generate_splits(d, 4, 0.1, seed=11)
    b = ds.generate_splits(d, 4, 0.1, seed=11)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.train_indices, y.train_indices)
        np.testing.assert_array_equal(x.test_indices, y.test_indices)
    c = ds.generate_splits(d, 4, 0.1, seed=12)
    assert any(not np.array_equal(x.test_indices, z.test_indices) for x, z in zip(a, c))


def test_split_test_frequency_monte_carlo():
    splits = ds.generate_splits(toy_dataset(n=20), 1000, 0.1, seed=0)
    counts = np.zeros(20)
    for sp in splits:
        counts[sp.test_indices] += 1
    freq = counts / 1000
    assert np.all(np.abs(freq - 0.1) <= 0.03)


def test_split_partition_invariants_1000():
    d = toy_dataset(n=37)
    for sp in ds.generate_splits(d, 1000, 0.1, seed=5):
        assert np.intersect1d(sp.train_indices, sp.test_indices).size == 0
        assert sp.train_indices.size + sp.test_indices.size == 37
        assert max(sp.train_indices.max(), sp.test_indices.max()) < 37
        assert sp.test_indices.size == 4


def test_split_too_small():
    with pytest.raises(DatasetError):
        ds.generate_splits(toy_dataset(n=5), 1, 0.1, seed=0)


def _write_split_files(d, train, test, k=0):
    (d / f"index_train_{k}.txt").write_text("".join(f"{i}\n" for i in train))
    (d / f"index_test_{k}.txt").write_text("".join(f"{i}\n" for i in test))


def test_fixed_splits_read(tmp_path):
    d = write_layout(tmp_path, "f", np.arange(12.0).reshape(4, 3))
    _write_split_files(d, [0, 1, 2], [3])
    dataset = ds.load_dataset(tmp_path, "f")
    (sp,) = ds.load_fixed_splits(dataset, tmp_path)
    np.testing.assert_array_equal(sp.train_indices, [0, 1, 2])
    np.testing.assert_array_equal(sp.test_indices, [3])
    assert ds.has_fixed_splits(tmp_path, "f")


def test_fixed_splits_overlap_rejected(tmp_path):
    d = write_layout(tmp_path, "f", np.arange(12.0).reshape(4, 3))
    _write_split_files(d, [0, 1], [1])
    with pytest.raises(DatasetError, match="overlap"):
        ds.load_fixed_splits(ds.load_dataset(tmp_path, "f"), tmp_path)


def test_fixed_splits_out_of_range(tmp_path):
    d = write_layout(tmp_path, "f", np.arange(12.0).reshape(4, 3))
    _write_split_files(d, [0, 1], [7])
    with pytest.raises(DatasetError, match="out of range"):
        ds.load_fixed_splits(ds.load_dataset(tmp_path, "f"), tmp_path)


def test_fixed_splits_n_splits_file(tmp_path):
    d = write_layout(tmp_path, "f", np.arange(30.0).reshape(10, 3))
    for k in range(3):
        _write_split_files(d, [i for i in range(10) if i != k], [k], k)
    (d / "n_splits.txt").write_text("2\n")
    assert len(ds.load_fixed_splits(ds.load_dataset(tmp_path, "f"), tmp_path)) == 2


def test_boston_published_layout_split_sizes(tmp_path):
    # Published Boston layout: 20 splits, each test set about 10% of 506 rows.
    boston = ds.load_dataset(DATA_DIR, "bostonHousing")
    d = write_layout(tmp_path, "bostonHousing", np.column_stack([boston.features, boston.targets]))
    for k, sp in enumerate(ds.generate_splits(boston, 20, 0.1, seed=0)):
        _write_split_files(d, sp.train_indices, sp.test_indices, k)
    (d / "n_splits.txt").write_text("20\n")
    splits = ds.load_fixed_splits(ds.load_dataset(tmp_path, "bostonHousing"), tmp_path)
    assert len(splits) == 20
    assert all(abs(sp.test_indices.size / 506 - 0.1) < 0.01 for sp in splits)


def test_carve_validation_sizes():
    sp = Split(np.arange(100), np.arange(100, 110))
    sub, val = ds.carve_validation(sp, 0.2, seed=1)
    assert val.size == 20 and sub.train_indices.size == 80
    assert np.intersect1d(val, sub.train_indices).size == 0
    np.testing.assert_array_equal(np.sort(np.concatenate([val, sub.train_indices])), np.arange(100))
    np.testing.assert_array_equal(sub.test_indices, sp.test_indices)


def test_carve_validation_deterministic():
    sp = Split(np.arange(50), np.arange(50, 55))
    np.testing.assert_array_equal(ds.carve_validation(sp, 0.2, 4)[1], ds.carve_validation(sp, 0.2, 4)[1])


@pytest.mark.parametrize("fraction,n", [(0.05, 8), (0.2, 4)])
def test_carve_validation_degenerate(fraction, n):
    with pytest.raises(DatasetError):
        ds.carve_validation(Split(np.arange(n), np.array([n])), fraction, 0)


def test_standardizer_constant_column():
    X = np.column_stack([np.full(5, 3.0), np.arange(5.0)])
    s = ds.fit_standardizer(Dataset("c", X, np.arange(5.0)), np.arange(5))
    assert s.feature_means[0] == 3.0 and s.feature_stds[0] == 1.0


def test_standardizer_targets_sample_std():
    d = Dataset("t", np.array([[0.0], [1.0]]), np.array([0.0, 2.0]))
    s = ds.fit_standardizer(d, [0, 1])
    assert s.target_mean == 1.0
    assert s.target_std == pytest.approx(np.sqrt(2.0), abs=1e-15)


def test_standardizer_too_few_rows(toy):
    with pytest.raises(DatasetError):
        ds.fit_standardizer(toy, [0])


def test_standardizer_train_rows_moments():
    d = toy_dataset(n=80, d=4, seed=2)
    idx = np.arange(60)
    s = ds.fit_standardizer(d, idx)
    X, y = ds.apply_standardizer(s, d.features[idx], d.targets[idx])
    np.testing.assert_allclose(X.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(X.std(axis=0, ddof=1), 1.0, atol=1e-10)
    assert abs(y.mean()) < 1e-10 and abs(y.std(ddof=1) - 1) < 1e-10


def test_standardizer_ignores_test_rows():
    d = toy_dataset(n=40, seed=3)
    idx = np.arange(30)
    X2 = d.features.copy()
    X2[30:] += 1000.0
    y2 = d.targets.copy()
    y2[30:] -= 50.0
    s1 = ds.fit_standardizer(d, idx)
    s2 = ds.fit_standardizer(Dataset("shifted", X2, y2), idx)
    np.testing.assert_array_equal(s1.feature_means, s2.feature_means)
    np.testing.assert_array_equal(s1.feature_stds, s2.feature_stds)
    assert (s1.target_mean, s1.target_std) == (s2.target_mean, s2.target_std)
    # Shifted test rows standardized with training statistics are far from zero mean.
    Xt, _ = ds.apply_standardizer(s2, X2[30:], None)
    assert np.all(np.abs(Xt.mean(axis=0)) > 10)


def test_standardizer_dimension_mismatch(toy):
    s = ds.fit_standardizer(toy, np.arange(10))
    with pytest.raises(DatasetError):
        ds.apply_standardizer(s, np.ones((2, toy.n_features + 1)), None)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(1e-3, 1e4), shift=st.floats(-1e4, 1e4))
def test_round_trip_targets(seed, scale, shift):
    rng = np.random.default_rng(seed)
    y = rng.normal(shift, scale, size=30)
    d = Dataset("r", rng.normal(size=(30, 2)), y)
    s = ds.fit_standardizer(d, np.arange(30))
    _, ys = ds.apply_standardizer(s, d.features, y)
    back = ds.invert_targets(s, ys)
    assert np.max(np.abs(back - y)) < 1e-12 * max(1.0, np.max(np.abs(y)))


def test_round_trip_random_data():
    rng = np.random.default_rng(0)
    y = rng.normal(size=200)
    d = Dataset("r", rng.normal(size=(200, 3)), y)
    s = ds.fit_standardizer(d, np.arange(150))
    _, ys = ds.apply_standardizer(s, d.features, y)
    assert np.max(np.abs(ds.invert_targets(s, ys) - y)) < 1e-12


def test_dataset_invariants():
    with pytest.raises(DatasetError):
        Dataset("x", np.ones((3, 2)), np.ones(2))
    with pytest.raises(DatasetError):
        Dataset("x", np.ones((3, 0)), np.ones(3))


def test_split_invariants():
    with pytest.raises(DatasetError):
        Split([0, 0, 1], [2])
    with pytest.raises(DatasetError):
        Split([], [1])


def test_defaults_per_dataset():
    assert ds.default_n_splits("protein-tertiary-structure") == 5
    assert ds.default_hidden_units("protein-tertiary-structure") == 100
    assert ds.default_n_splits("bostonHousing") == 20
    assert ds.default_hidden_units("bostonHousing") == 50


def test_list_datasets():
    assert {"bostonHousing", "concrete", "wine-quality-red"} <= set(ds.list_datasets(DATA_DIR))
