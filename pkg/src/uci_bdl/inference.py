"""MC-dropout prediction and the two test metrics (RMSE, predictive log-likelihood)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import apply_standardizer, invert_targets
from .nn import TrainedModel

__all__ = [
    "PredictiveSamples",
    "MetricPair",
    "logsumexp",
    "mc_predict",
    "deterministic_predict",
    "rmse",
    "predictive_log_likelihood",
    "evaluate",
]

DEFAULT_MC_SAMPLES = 10_000

# Bound on T_chunk * n_test * width so a chunk of masks stays around 32 MB.
_CHUNK_ELEMS = 4_000_000


@dataclass(frozen=True)
class PredictiveSamples:
    samples: np.ndarray  # (T, n_test), original target units

    def __post_init__(self) -> None:
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] < 1:
            raise ValueError("samples must be a (T, n_test) array with T >= 1")
        if not np.isfinite(s).all():
            raise ValueError("non-finite predictive samples")
        object.__setattr__(self, "samples", s)

    @property
    def T(self) -> int:
        return self.samples.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)


@dataclass(frozen=True)
class MetricPair:
    rmse: float
    mean_log_likelihood: float


def logsumexp(a: np.ndarray, axis: int = 0) -> np.ndarray:
    """``log(sum(exp(a)))`` along ``axis``, shifted by the maximum for stability."""
    a = np.asarray(a, dtype=np.float64)
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    out = np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True)) + amax
    return np.squeeze(out, axis=axis)


def _standardized_test_inputs(model: TrainedModel, X_test) -> np.ndarray:
    X = np.asarray(X_test, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.config.input_dim:
        raise ValueError(f"X_test of shape {X.shape} does not match input_dim={model.config.input_dim}")
    return apply_standardizer(model.standardizer, X)[0]


def deterministic_predict(model: TrainedModel, X_test) -> np.ndarray:
    """Dropout-free network output in original target units."""
    X = _standardized_test_inputs(model, X_test)
    p = model.params
    h = np.maximum(X @ p.W1 + p.b1, 0.0)
    return invert_targets(model.standardizer, h @ p.W2[:, 0] + p.b2)


def mc_predict(model: TrainedModel, X_test, T: int = DEFAULT_MC_SAMPLES, seed: int = 0) -> PredictiveSamples:
    """``T`` stochastic forward passes with fresh dropout masks, de-standardized.

    Input and hidden masks come from separate streams so the result does not depend
    on how the passes are chunked.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    X = _standardized_test_inputs(model, X_test)
    cfg, p = model.config, model.params
    n, D, H = X.shape[0], cfg.input_dim, cfg.hidden_units
    d = cfg.dropout
    if d == 0.0:
        row = deterministic_predict(model, X_test)
        return PredictiveSamples(np.broadcast_to(row, (T, n)).copy())
    keep = 1.0 - d
    in_ss, hid_ss = np.random.SeedSequence(seed).spawn(2)
    rng_in, rng_hid = np.random.default_rng(in_ss), np.random.default_rng(hid_ss)
    out = np.empty((T, n))
    chunk = max(1, _CHUNK_ELEMS // max(1, n * max(D, H)))
    for lo in range(0, T, chunk):
        t = min(chunk, T - lo)
        Xm = X[None] * ((rng_in.random((t, n, D)) < keep) * (1.0 / keep))
        h = np.maximum(Xm @ p.W1 + p.b1, 0.0)
        h *= (rng_hid.random((t, n, H)) < keep) * (1.0 / keep)
        out[lo:lo + t] = h @ p.W2[:, 0] + p.b2
    return PredictiveSamples(invert_targets(model.standardizer, out))


def _check_targets(samples: PredictiveSamples, y_true) -> np.ndarray:
    y = np.asarray(y_true, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ValueError("empty test set")
    if samples.samples.shape[1] != y.size:
        raise ValueError(f"{samples.samples.shape[1]} predictions for {y.size} targets")
    return y


def rmse(samples: PredictiveSamples, y_true) -> float:
    """Root mean squared error of the MC-averaged prediction."""
    y = _check_targets(samples, y_true)
    return float(np.sqrt(np.mean((samples.mean - y) ** 2)))


def predictive_log_likelihood(samples: PredictiveSamples, y_true, tau: float) -> float:
    """Mean log density of ``y_true`` under the equal-weight mixture of N(y_t, 1/tau).

    ``tau`` is the model precision in original target units.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    y = _check_targets(samples, y_true)
    ll = (logsumexp(-0.5 * tau * (y[None, :] - samples.samples) ** 2, axis=0)
          - np.log(samples.T) - 0.5 * np.log(2 * np.pi) + 0.5 * np.log(tau))
    return float(np.mean(ll))


def evaluate(model: TrainedModel, X_test, y_test, tau: float, T: int = DEFAULT_MC_SAMPLES,
             seed: int = 0) -> MetricPair:
    s = mc_predict(model, X_test, T, seed)
    return MetricPair(rmse(s, y_test), predictive_log_likelihood(s, y_test, tau))
