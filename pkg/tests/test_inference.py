import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uci_bdl import inference as inf
from uci_bdl import nn
from uci_bdl.datasets import Standardizer, apply_standardizer, fit_standardizer

from conftest import toy_dataset

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def _model(dropout=0.05, seed=0, n=80, epochs=30):
    d = toy_dataset(n=n, d=3, noise=0.1, seed=seed)
    idx = np.arange(n)
    s = fit_standardizer(d, idx)
    X, y = apply_standardizer(s, d.features, d.targets)
    m = nn.train(X, y, nn.MLPConfig(3, 16, dropout, weight_decay=1e-4), nn.TrainConfig(epochs=epochs, seed=seed), s)
    return d, m


def test_zero_dropout_rows_identical():
    d, m = _model(dropout=0.0)
    s = inf.mc_predict(m, d.features[:7], T=5)
    assert s.samples.shape == (5, 7)
    assert np.all(s.samples == s.samples[0])
    np.testing.assert_allclose(s.samples[0], inf.deterministic_predict(m, d.features[:7]), rtol=1e-12)


def test_dropout_gives_spread():
    d, m = _model(dropout=0.05)
    s = inf.mc_predict(m, d.features[:10], T=200)
    assert np.all(s.samples.var(axis=0) > 0)


def test_mc_predict_seeded_and_chunk_invariant(monkeypatch):
    d, m = _model(dropout=0.1)
    a = inf.mc_predict(m, d.features[:9], T=50, seed=3).samples
    b = inf.mc_predict(m, d.features[:9], T=50, seed=3).samples
    np.testing.assert_array_equal(a, b)
    monkeypatch.setattr(inf, "_CHUNK_ELEMS", 100)
    c = inf.mc_predict(m, d.features[:9], T=50, seed=3).samples
    np.testing.assert_array_equal(a, c)
    assert not np.array_equal(a, inf.mc_predict(m, d.features[:9], T=50, seed=4).samples)


def test_mc_mean_matches_manual_forward():
    d, m = _model(dropout=0.2)
    X = d.features[:4]
    T = 30
    s = inf.mc_predict(m, X, T=T, seed=1)
    Xs = apply_standardizer(m.standardizer, X)[0]
    in_ss, hid_ss = np.random.SeedSequence(1).spawn(2)
    ri, rh = np.random.default_rng(in_ss), np.random.default_rng(hid_ss)
    mi = (ri.random((T, 4, 3)) < 0.8) / 0.8
    mh = (rh.random((T, 4, 16)) < 0.8) / 0.8
    rows = []
    for t in range(T):
        out, _ = nn.forward(m.params, Xs, (mi[t], mh[t]), "stochastic")
        rows.append(out * m.standardizer.target_std + m.standardizer.target_mean)
    np.testing.assert_allclose(s.samples, np.array(rows), rtol=1e-10, atol=1e-10)


def test_mc_predict_errors():
    d, m = _model()
    with pytest.raises(ValueError):
        inf.mc_predict(m, d.features[:, :2])
    with pytest.raises(ValueError):
        inf.mc_predict(m, d.features, T=0)


def test_rmse_constant_offset():
    y = np.array([1.0, 2.0, -3.0, 0.5])
    s = inf.PredictiveSamples(np.tile(y + 0.7, (4, 1)))
    assert inf.rmse(s, y) == pytest.approx(0.7, abs=1e-14)
    assert inf.rmse(inf.PredictiveSamples(np.tile(y, (3, 1))), y) == 0.0


def test_ll_single_sample_exact_hit():
    s = inf.PredictiveSamples(np.array([[2.0, -1.0]]))
    assert inf.predictive_log_likelihood(s, [2.0, -1.0], 1.0) == pytest.approx(-0.918938533, abs=1e-8)


def test_ll_naive_sum_oracle():
    samples = np.array([[0.1, 1.0], [0.3, 1.5], [-0.2, 0.7]])
    y = np.array([0.0, 1.2])
    tau = 2.5
    expected = []
    for j in range(2):
        dens = sum(math.sqrt(tau / (2 * math.pi)) * math.exp(-0.5 * tau * (y[j] - samples[t, j]) ** 2)
                   for t in range(3)) / 3
        expected.append(math.log(dens))
    got = inf.predictive_log_likelihood(inf.PredictiveSamples(samples), y, tau)
    assert got == pytest.approx(sum(expected) / 2, abs=1e-12)


def test_ll_no_underflow_far_from_samples():
    # The naive sum underflows to log(0) here; the shifted form stays finite.
    s = inf.PredictiveSamples(np.array([[0.0], [1.0]]))
    ll = inf.predictive_log_likelihood(s, [100.0], 1e3)
    expected = -0.5 * 1e3 * 99.0 ** 2 - math.log(2) - HALF_LOG_2PI + 0.5 * math.log(1e3)
    assert math.isfinite(ll)
    assert ll == pytest.approx(expected, rel=1e-12)


def test_ll_collapsed_samples_equal_gaussian():
    y = np.array([0.5, -0.2, 1.1])
    mu = np.array([0.4, 0.0, 1.0])
    tau = 3.0
    s = inf.PredictiveSamples(np.tile(mu, (25, 1)))
    gauss = np.mean(-HALF_LOG_2PI + 0.5 * math.log(tau) - 0.5 * tau * (y - mu) ** 2)
    assert inf.predictive_log_likelihood(s, y, tau) == pytest.approx(gauss, abs=1e-12)


def test_ll_best_tau_is_inverse_mse():
    rng = np.random.default_rng(0)
    mu = rng.normal(size=200)
    y = mu + rng.normal(scale=0.5, size=200)
    s = inf.PredictiveSamples(mu[None])
    taus = np.linspace(0.5, 10, 20_000)
    lls = [inf.predictive_log_likelihood(s, y, t) for t in taus]
    best = taus[int(np.argmax(lls))]
    assert best == pytest.approx(1.0 / np.mean((y - mu) ** 2), rel=1e-3)


def test_ll_units_change_with_scale():
    """Rescaling targets by c and precision by 1/c**2 shifts the mean LL by -log c."""
    rng = np.random.default_rng(2)
    samples = rng.normal(size=(40, 6))
    y = rng.normal(size=6)
    c = 7.0
    a = inf.predictive_log_likelihood(inf.PredictiveSamples(samples), y, 2.0)
    b = inf.predictive_log_likelihood(inf.PredictiveSamples(c * samples), c * y, 2.0 / c ** 2)
    assert b == pytest.approx(a - math.log(c), abs=1e-12)


def test_ll_errors():
    s = inf.PredictiveSamples(np.zeros((2, 3)))
    for tau in (0.0, -1.0, float("nan")):
        with pytest.raises(ValueError):
            inf.predictive_log_likelihood(s, np.zeros(3), tau)
    with pytest.raises(ValueError):
        inf.predictive_log_likelihood(s, np.zeros(2), 1.0)
    with pytest.raises(ValueError):
        inf.predictive_log_likelihood(inf.PredictiveSamples(np.zeros((2, 0))), np.zeros(0), 1.0)
    with pytest.raises(ValueError):
        inf.PredictiveSamples(np.array([[np.nan]]))


def test_logsumexp_extremes():
    assert inf.logsumexp(np.array([1e5, 1e5])) == pytest.approx(1e5 + math.log(2))
    assert inf.logsumexp(np.array([-1e5, -1e5])) == pytest.approx(-1e5 + math.log(2))
    assert inf.logsumexp(np.array([-np.inf, 0.0])) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20), st.floats(-1e3, 1e3))
def test_logsumexp_shift_invariance(values, c):
    a = np.array(values)
    assert inf.logsumexp(a + c) == pytest.approx(inf.logsumexp(a) + c, abs=1e-9)
    assert inf.logsumexp(a) == pytest.approx(math.log(math.fsum(math.exp(v) for v in values)), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.floats(0.01, 100.0))
def test_ll_bounded_by_density_peak(T, tau):
    rng = np.random.default_rng(T)
    s = inf.PredictiveSamples(rng.normal(size=(T, 5)))
    ll = inf.predictive_log_likelihood(s, rng.normal(size=5), tau)
    assert ll <= 0.5 * math.log(tau) - HALF_LOG_2PI + 1e-12


def test_evaluate_combines_metrics():
    d, m = _model(dropout=0.05)
    X, y = d.features[:20], d.targets[:20]
    pair = inf.evaluate(m, X, y, tau=4.0, T=100, seed=5)
    s = inf.mc_predict(m, X, 100, 5)
    assert pair.rmse == inf.rmse(s, y)
    assert pair.mean_log_likelihood == inf.predictive_log_likelihood(s, y, 4.0)


def test_predictions_in_original_units():
    d, m = _model(dropout=0.0, epochs=300)
    shifted = Standardizer(m.standardizer.feature_means, m.standardizer.feature_stds,
                           m.standardizer.target_mean + 100.0, m.standardizer.target_std)
    m2 = nn.TrainedModel(m.params, m.config, shifted, 0.0, None)
    np.testing.assert_allclose(inf.deterministic_predict(m2, d.features), inf.deterministic_predict(m, d.features) + 100.0)
