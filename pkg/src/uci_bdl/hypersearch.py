"""Selection of the model precision tau and dropout rate d.

Two procedures are provided: an exhaustive grid scored on a validation carve-out,
and Bayesian optimization with a fixed-hyperparameter GP surrogate and expected
improvement, searching over (log tau, d) rescaled to the unit square.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky
from scipy.stats import norm, qmc

from .datasets import Dataset, Split, apply_standardizer, carve_validation, fit_standardizer
from .inference import evaluate
from .nn import MLPConfig, TrainConfig, TrainedModel, TrainingError, train, weight_decay

__all__ = [
    "HyperPair",
    "SearchSpace",
    "BOBounds",
    "KernelSettings",
    "GPSurrogate",
    "GridRow",
    "GridSearchResult",
    "BOResult",
    "default_tau_grid",
    "default_search_space",
    "default_bo_bounds",
    "fit_model",
    "validation_objective",
    "grid_search",
    "select_best",
    "gp_fit",
    "gp_posterior",
    "expected_improvement",
    "bo_maximize",
    "bo_search",
]

DEFAULT_DROPOUT_GRID = (0.005, 0.01, 0.05, 0.1)
# Multiples of 1/var(y_train); see default_tau_grid.
TAU_SPAN = (0.5, 1000.0)
DEFAULT_DROPOUT_BOUNDS = (0.005, 0.25)
FAILED_OBJECTIVE = -1e6


@dataclass(frozen=True, order=True)
class HyperPair:
    tau: float
    dropout: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise ValueError(f"tau must be positive and finite, got {self.tau}")
        if not (math.isfinite(self.dropout) and 0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class SearchSpace:
    tau_grid: tuple
    dropout_grid: tuple = DEFAULT_DROPOUT_GRID

    def __post_init__(self) -> None:
        if not self.tau_grid or not self.dropout_grid:
            raise ValueError("search grids must be non-empty")
        if any(not t > 0 for t in self.tau_grid):
            raise ValueError("tau grid values must be strictly positive")
        object.__setattr__(self, "tau_grid", tuple(float(t) for t in self.tau_grid))
        object.__setattr__(self, "dropout_grid", tuple(float(d) for d in self.dropout_grid))

    def pairs(self) -> list[HyperPair]:
        return [HyperPair(t, d) for t in self.tau_grid for d in self.dropout_grid]


@dataclass(frozen=True)
class BOBounds:
    tau: tuple[float, float]
    dropout: tuple[float, float] = DEFAULT_DROPOUT_BOUNDS

    def __post_init__(self) -> None:
        lo, hi = self.tau
        if not 0 < lo < hi:
            raise ValueError("tau bounds must satisfy 0 < lo < hi")
        dlo, dhi = self.dropout
        if not 0 <= dlo < dhi < 1:
            raise ValueError("dropout bounds must satisfy 0 <= lo < hi < 1")

    def from_unit(self, u) -> HyperPair:
        lo, hi = np.log(self.tau)
        dlo, dhi = self.dropout
        return HyperPair(float(np.exp(lo + u[0] * (hi - lo))), float(dlo + u[1] * (dhi - dlo)))

    def to_unit(self, pair: HyperPair) -> np.ndarray:
        lo, hi = np.log(self.tau)
        dlo, dhi = self.dropout
        return np.array([(np.log(pair.tau) - lo) / (hi - lo), (pair.dropout - dlo) / (dhi - dlo)])


def default_tau_grid(y_train, n: int = 10) -> tuple:
    """``n`` log-spaced precisions spanning ``TAU_SPAN`` times ``1/var(y_train)``."""
    base = 1.0 / float(np.var(y_train, ddof=1))
    return tuple(np.geomspace(TAU_SPAN[0] * base, TAU_SPAN[1] * base, n))


def default_search_space(y_train, n_tau: int = 10, dropout_grid=DEFAULT_DROPOUT_GRID) -> SearchSpace:
    return SearchSpace(default_tau_grid(y_train, n_tau), tuple(dropout_grid))


def default_bo_bounds(y_train, dropout=DEFAULT_DROPOUT_BOUNDS) -> BOBounds:
    base = 1.0 / float(np.var(y_train, ddof=1))
    return BOBounds((TAU_SPAN[0] * base, TAU_SPAN[1] * base), tuple(dropout))


# Model fitting shared by both search procedures and the runner.

def fit_model(dataset: Dataset, train_idx, pair: HyperPair, mlp_cfg: MLPConfig,
              train_cfg: TrainConfig) -> TrainedModel:
    """Standardize on ``train_idx`` and train with the weight decay implied by ``pair``."""
    s = fit_standardizer(dataset, train_idx)
    X, y = apply_standardizer(s, dataset.features[train_idx], dataset.targets[train_idx])
    lam = weight_decay(mlp_cfg.lengthscale, pair.dropout, len(train_idx), pair.tau)
    cfg = MLPConfig(mlp_cfg.input_dim, mlp_cfg.hidden_units, pair.dropout, mlp_cfg.lengthscale, lam)
    return train(X, y, cfg, train_cfg, s)


@dataclass(frozen=True)
class GridRow:
    pair: HyperPair
    val_rmse: float
    val_ll: float
    wall_time: float

    def as_dict(self) -> dict:
        return {"tau": self.pair.tau, "dropout": self.pair.dropout, "val_rmse": self.val_rmse,
                "val_ll": self.val_ll, "wall_time": self.wall_time}


def validation_objective(dataset: Dataset, train_sub: np.ndarray, val: np.ndarray, mlp_cfg: MLPConfig,
                         train_cfg: TrainConfig, mc_samples: int, mc_seed: int) -> Callable[[HyperPair], GridRow]:
    """Closure training on ``train_sub`` and scoring on ``val`` for one pair."""
    X_val, y_val = dataset.features[val], dataset.targets[val]

    def objective(pair: HyperPair) -> GridRow:
        start = time.perf_counter()
        model = fit_model(dataset, train_sub, pair, mlp_cfg, train_cfg)
        m = evaluate(model, X_val, y_val, pair.tau, mc_samples, mc_seed)
        return GridRow(pair, m.rmse, m.mean_log_likelihood, time.perf_counter() - start)

    return objective


def _score(row: GridRow, criterion: str) -> float:
    if criterion == "ll":
        return row.val_ll
    if criterion == "rmse":
        return -row.val_rmse
    raise ValueError(f"unknown selection criterion {criterion!r}")


def select_best(table: Sequence[GridRow], criterion: str = "ll") -> HyperPair:
    """Argmax of the criterion; ties go to the larger tau, then the smaller d."""
    if not table:
        raise ValueError("empty search table")
    best = max(table, key=lambda r: (_score(r, criterion), r.pair.tau, -r.pair.dropout))
    return best.pair


@dataclass
class GridSearchResult:
    best: HyperPair
    table: list[GridRow]
    model: TrainedModel | None = None
    validation_indices: np.ndarray | None = None


def grid_search(dataset: Dataset, split: Split, space: SearchSpace, mlp_cfg: MLPConfig,
                train_cfg: TrainConfig, criterion: str = "ll", *, val_fraction: float = 0.2,
                seed: int = 0, mc_samples: int = 1000, retrain: bool = True,
                map_fn: Callable = map) -> GridSearchResult:
    """Score every (tau, d) pair on a validation carve-out of the training set.

    The default criterion is validation log-likelihood; ``"rmse"`` selects by
    validation error.  The winner is retrained on the full training set unless
    ``retrain`` is false.  ``map_fn`` may be a pool's ``map`` for concurrent scoring.
    """
    pairs = space.pairs()
    train_sub, val = carve_validation(split, val_fraction, seed)
    objective = validation_objective(dataset, train_sub.train_indices, val, mlp_cfg, train_cfg,
                                     mc_samples, seed)
    table = []
    for pair, row in zip(pairs, map_fn(_guarded(objective), pairs)):
        if isinstance(row, Exception):
            raise TrainingError(f"grid point tau={pair.tau:.6g}, d={pair.dropout:g}: {row}") from row
        table.append(row)
    best = select_best(table, criterion)
    model = fit_model(dataset, split.train_indices, best, mlp_cfg, train_cfg) if retrain else None
    return GridSearchResult(best, table, model, val)


class _guarded:
    """Picklable wrapper returning exceptions instead of raising them."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, arg):
        try:
            return self.fn(arg)
        except (TrainingError, ValueError, FloatingPointError) as exc:
            return exc


# Gaussian-process surrogate.

@dataclass(frozen=True)
class KernelSettings:
    lengthscales: tuple = (0.2, 0.2)
    signal_variance: float | None = None  # None: variance of the observed values
    noise_variance: float = 1e-4
    jitter_start: float = 1e-10
    jitter_max: float = 1e-6


@dataclass(frozen=True)
class GPSurrogate:
    inputs: np.ndarray
    values: np.ndarray
    lengthscales: np.ndarray
    signal_variance: float
    noise_variance: float
    mean: float
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float


def _rbf(A: np.ndarray, B: np.ndarray, lengthscales: np.ndarray, var: float) -> np.ndarray:
    diff = (A[:, None, :] - B[None, :, :]) / lengthscales
    return var * np.exp(-0.5 * np.sum(diff ** 2, axis=-1))


def gp_fit(inputs, values, hyper: KernelSettings = KernelSettings()) -> GPSurrogate:
    """Exact GP regression with fixed RBF hyperparameters.

    Values are centered on their mean; the diagonal jitter grows tenfold from
    ``jitter_start`` until the Cholesky factorization succeeds.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    y = np.asarray(values, dtype=np.float64).reshape(-1)
    if X.shape[0] < 1 or X.shape[0] != y.size:
        raise ValueError("need at least one observation with matching values")
    ls = np.broadcast_to(np.asarray(hyper.lengthscales, dtype=np.float64), (X.shape[1],)).copy()
    if hyper.signal_variance is not None:
        sv = float(hyper.signal_variance)
    else:
        sv = float(np.var(y)) if y.size > 1 else 0.0
        if not sv > 1e-12:
            sv = 1.0
    mu = float(np.mean(y))
    K = _rbf(X, X, ls, sv) + hyper.noise_variance * np.eye(X.shape[0])
    jitter = hyper.jitter_start
    while True:
        try:
            L = cholesky(K + jitter * np.eye(X.shape[0]), lower=True)
            break
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > hyper.jitter_max * (1 + 1e-9):
                raise np.linalg.LinAlgError("kernel matrix not positive definite after maximum jitter")
    alpha = cho_solve((L, True), y - mu)
    return GPSurrogate(X, y, ls, sv, hyper.noise_variance, mu, L, alpha, jitter)


def gp_posterior(gp: GPSurrogate, query):
    """Posterior mean and latent variance at one point or a batch of points."""
    Q = np.asarray(query, dtype=np.float64)
    single = Q.ndim == 1
    Q = np.atleast_2d(Q)
    k = _rbf(Q, gp.inputs, gp.lengthscales, gp.signal_variance)
    mean = gp.mean + k @ gp.alpha
    v = cho_solve((gp.chol, True), k.T)
    var = np.maximum(gp.signal_variance - np.sum(k * v.T, axis=1), 0.0)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def expected_improvement(mean, variance, best_so_far):
    """Expected improvement over ``best_so_far`` for maximization."""
    mu = np.asarray(mean, dtype=np.float64)
    sd = np.sqrt(np.maximum(np.asarray(variance, dtype=np.float64), 0.0))
    gain = mu - best_so_far
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        z = np.where(sd > 0, gain / np.where(sd > 0, sd, 1.0), 0.0)
        ei = np.where(sd > 0, gain * norm.cdf(z) + sd * norm.pdf(z), np.maximum(gain, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


# Bayesian optimization.

@dataclass
class BOResult:
    best: HyperPair | np.ndarray
    best_value: float
    history: list = field(default_factory=list)  # (point, value, incumbent_value)


def bo_maximize(f_unit: Callable[[np.ndarray], float], n_dims: int, n_init: int = 5, n_iters: int = 20,
                seed: int = 0, n_candidates: int = 2048, hyper: KernelSettings = KernelSettings(),
                init_map: Callable = map) -> BOResult:
    """Maximize ``f_unit`` over the unit cube.

    A scrambled Halton design of ``n_init`` points is followed by ``n_iters`` rounds
    of GP fit and EI maximization over uniform random candidates.  A raising
    objective is recorded as ``FAILED_OBJECTIVE``; the GP then sees the worst
    successful value in its place.
    """
    if n_init < 2:
        raise ValueError("n_init must be >= 2")
    if n_iters < 0:
        raise ValueError("n_iters must be >= 0")
    ss_design, ss_cand = np.random.SeedSequence([seed, 0xB0]).spawn(2)
    design = qmc.Halton(d=n_dims, scramble=True, seed=np.random.default_rng(ss_design)).random(n_init)
    cand_rng = np.random.default_rng(ss_cand)
    safe = _guarded_value(f_unit)

    points: list[np.ndarray] = []
    values: list[float] = []
    history = []
    best_i = None

    def record(u, val):
        nonlocal best_i
        points.append(np.asarray(u, dtype=np.float64))
        values.append(val)
        if best_i is None or val > values[best_i]:
            best_i = len(values) - 1
        history.append((points[-1], val, values[best_i]))

    for u, val in zip(design, init_map(safe, list(design))):
        record(u, val)
    for _ in range(n_iters):
        vals = np.array(values)
        ok = vals > FAILED_OBJECTIVE
        fit_vals = np.where(ok, vals, vals[ok].min() if ok.any() else 0.0)
        gp = gp_fit(np.array(points), fit_vals, hyper)
        cands = cand_rng.random((n_candidates, n_dims))
        mu, var = gp_posterior(gp, cands)
        ei = expected_improvement(mu, var, float(fit_vals.max()))
        u = cands[int(np.argmax(ei))]
        record(u, safe(u))
    return BOResult(points[best_i], values[best_i], history)


class _guarded_value:
    def __init__(self, fn):
        self.fn = fn

    def __call__(self, u) -> float:
        try:
            val = float(self.fn(u))
        except (TrainingError, ValueError, FloatingPointError, np.linalg.LinAlgError):
            return FAILED_OBJECTIVE
        return val if math.isfinite(val) else FAILED_OBJECTIVE


class _UnitObjective:
    def __init__(self, objective, bounds):
        self.objective, self.bounds = objective, bounds

    def __call__(self, u):
        return self.objective(self.bounds.from_unit(u))


def bo_search(objective: Callable[[HyperPair], float], bounds: BOBounds, n_init: int = 5,
              n_iters: int = 20, seed: int = 0, **kw) -> BOResult:
    """Bayesian optimization of ``objective`` over (log tau, d) within ``bounds``.

    History entries are ``(HyperPair, value, incumbent_value)``.
    """
    res = bo_maximize(_UnitObjective(objective, bounds), 2, n_init, n_iters, seed, **kw)
    history = [(bounds.from_unit(u), v, inc) for u, v, inc in res.history]
    return BOResult(bounds.from_unit(res.best), res.best_value, history)
