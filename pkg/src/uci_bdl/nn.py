"""Single-hidden-layer ReLU network with dropout and a mini-batch Adam trainer.

Dropout is applied to the input of both weight layers using inverted scaling, so
kept units are multiplied by ``1/(1-d)``.  Gradients are derived by hand for this
fixed architecture.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import Standardizer

__all__ = [
    "TrainingError",
    "MLPConfig",
    "MLPParams",
    "TrainConfig",
    "AdamState",
    "TrainedModel",
    "Cache",
    "weight_decay",
    "init_params",
    "sample_masks",
    "forward",
    "loss",
    "backward",
    "adam_init",
    "adam_step",
    "train",
    "save_model",
    "load_model",
]

DEFAULT_LENGTHSCALE = 1e-2


class TrainingError(RuntimeError):
    """Training diverged; carries the epoch at which the loss became non-finite."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class MLPConfig:
    input_dim: int
    hidden_units: int = 50
    dropout: float = 0.05
    lengthscale: float = DEFAULT_LENGTHSCALE
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.hidden_units < 1:
            raise ValueError("input_dim and hidden_units must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.dropout}")
        if self.lengthscale <= 0:
            raise ValueError("lengthscale must be positive")
        if not (np.isfinite(self.weight_decay) and self.weight_decay >= 0):
            raise ValueError("weight_decay must be finite and non-negative")


@dataclass(frozen=True)
class MLPParams:
    W1: np.ndarray  # (input_dim, hidden)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (hidden, 1)
    b2: float

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), [self.b2]])

    @classmethod
    def from_flat(cls, v: np.ndarray, input_dim: int, hidden: int) -> "MLPParams":
        v = np.asarray(v, dtype=np.float64)
        i = input_dim * hidden
        return cls(
            W1=v[:i].reshape(input_dim, hidden).copy(),
            b1=v[i:i + hidden].copy(),
            W2=v[i + hidden:i + 2 * hidden].reshape(hidden, 1).copy(),
            b2=float(v[i + 2 * hidden]),
        )

    @property
    def shapes(self) -> tuple[int, int]:
        return self.W1.shape


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass(frozen=True)
class TrainedModel:
    params: MLPParams
    config: MLPConfig
    standardizer: Standardizer
    train_wall_time: float = 0.0
    loss_history: tuple = field(default=(), compare=False)


@dataclass
class Cache:
    X_in: np.ndarray  # input after dropout
    pre: np.ndarray  # hidden pre-activation
    h_in: np.ndarray  # hidden activation after dropout
    hidden_mask: np.ndarray | None
    params: MLPParams
    predictions: np.ndarray


def weight_decay(lengthscale: float, dropout: float, n_train: int, tau: float) -> float:
    """L2 coefficient ``l^2 (1-d) / (2 N tau)`` tying the prior to (tau, d)."""
    if tau <= 0 or n_train < 1:
        raise ValueError("tau must be positive and n_train >= 1")
    return lengthscale ** 2 * (1.0 - dropout) / (2.0 * n_train * tau)


def init_params(config: MLPConfig, seed) -> MLPParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    D, H = config.input_dim, config.hidden_units
    lim1 = np.sqrt(6.0 / (D + H))
    lim2 = np.sqrt(6.0 / (H + 1))
    W1 = rng.uniform(-lim1, lim1, size=(D, H))
    W2 = rng.uniform(-lim2, lim2, size=(H, 1))
    return MLPParams(W1=W1, b1=np.zeros(H), W2=W2, b2=0.0)


def _mask(rng: np.random.Generator, shape, dropout: float) -> np.ndarray:
    if dropout == 0.0:
        return np.ones(shape)
    keep = 1.0 - dropout
    return (rng.random(shape) < keep) * (1.0 / keep)


def sample_masks(config: MLPConfig, batch: int, rng: np.random.Generator):
    """Inverted-dropout masks for the input layer and the hidden layer."""
    return (_mask(rng, (batch, config.input_dim), config.dropout),
            _mask(rng, (batch, config.hidden_units), config.dropout))


def forward(params: MLPParams, X: np.ndarray, masks=None, mode: str = "deterministic"):
    """Network output for a batch, plus the intermediates ``backward`` needs."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.W1.shape[0]:
        raise ValueError(f"input of shape {X.shape} does not match W1 {params.W1.shape}")
    if not np.isfinite(X).all():
        raise ValueError("non-finite network input")
    if mode == "stochastic":
        if masks is None:
            raise ValueError("stochastic mode requires dropout masks")
        in_mask, hid_mask = masks
        if in_mask.shape != X.shape or hid_mask.shape != (X.shape[0], params.W1.shape[1]):
            raise ValueError("mask shapes do not match the batch")
        X_in = X * in_mask
    elif mode == "deterministic":
        hid_mask = None
        X_in = X
    else:
        raise ValueError(f"unknown mode {mode!r}")
    pre = X_in @ params.W1 + params.b1
    h = np.maximum(pre, 0.0)
    h_in = h if hid_mask is None else h * hid_mask
    out = h_in @ params.W2[:, 0] + params.b2
    return out, Cache(X_in, pre, h_in, hid_mask, params, out)


def _sq_norm(params: MLPParams) -> float:
    return float(np.sum(params.W1 ** 2) + np.sum(params.W2 ** 2) + np.sum(params.b1 ** 2)
                 + params.b2 ** 2)


def loss(predictions, targets, params: MLPParams, lam: float) -> float:
    """Batch mean squared error plus ``lam`` times the squared norm of all parameters."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"predictions {p.shape} and targets {t.shape} differ")
    val = float(np.mean((p - t) ** 2)) + lam * _sq_norm(params)
    if not np.isfinite(val):
        raise ValueError("non-finite loss")
    return val


def backward(cache: Cache, targets, lam: float) -> MLPParams:
    """Exact gradient of ``loss`` with the dropout masks held fixed."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != cache.predictions.shape:
        raise ValueError("targets do not match the cached forward pass")
    p = cache.params
    g_out = (2.0 / t.shape[0]) * (cache.predictions - t)
    gW2 = cache.h_in.T @ g_out + 2.0 * lam * p.W2[:, 0]
    gb2 = float(g_out.sum()) + 2.0 * lam * p.b2
    g_h = np.outer(g_out, p.W2[:, 0])
    if cache.hidden_mask is not None:
        g_h *= cache.hidden_mask
    g_h *= cache.pre > 0
    gW1 = cache.X_in.T @ g_h + 2.0 * lam * p.W1
    gb1 = g_h.sum(axis=0) + 2.0 * lam * p.b1
    return MLPParams(W1=gW1, b1=gb1, W2=gW2[:, None], b2=gb2)


def adam_init(params: MLPParams) -> AdamState:
    n = params.flat().size
    return AdamState(np.zeros(n), np.zeros(n), 0)


def _adam_update(w, g, m, v, t, cfg: TrainConfig) -> None:
    # In place on w, m, v; t is the already-incremented step count.
    m *= cfg.beta1
    m += (1.0 - cfg.beta1) * g
    v *= cfg.beta2
    v += (1.0 - cfg.beta2) * (g * g)
    step = cfg.learning_rate * np.sqrt(1.0 - cfg.beta2 ** t) / (1.0 - cfg.beta1 ** t)
    w -= step * m / (np.sqrt(v) + cfg.eps * np.sqrt(1.0 - cfg.beta2 ** t))


def adam_step(params: MLPParams, grads: MLPParams, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update; returns new params and state."""
    w = params.flat()
    m, v = state.m.copy(), state.v.copy()
    t = state.t + 1
    _adam_update(w, grads.flat(), m, v, t, cfg)
    D, H = params.shapes
    return MLPParams.from_flat(w, D, H), AdamState(m, v, t)


class _FlatNet:
    """Views of one flat parameter vector; used by the training loop to avoid repacking."""

    def __init__(self, params: MLPParams):
        D, H = params.shapes
        self.D, self.H = D, H
        self.w = params.flat()
        self.g = np.zeros_like(self.w)
        i = D * H
        self.W1 = self.w[:i].reshape(D, H)
        self.b1 = self.w[i:i + H]
        self.W2 = self.w[i + H:i + 2 * H]
        self.gW1 = self.g[:i].reshape(D, H)
        self.gb1 = self.g[i:i + H]
        self.gW2 = self.g[i + H:i + 2 * H]
        self.last = i + 2 * H

    def step_grad(self, X, y, in_mask, hid_mask, lam) -> float:
        w = self.w
        X_in = X if in_mask is None else X * in_mask
        pre = X_in @ self.W1
        pre += self.b1
        h = np.maximum(pre, 0.0)
        if hid_mask is not None:
            h *= hid_mask
        r = h @ self.W2
        r += w[self.last] - y
        n = y.shape[0]
        data = float(r @ r) / n
        g_out = (2.0 / n) * r
        np.dot(h.T, g_out, out=self.gW2)
        g_h = np.multiply.outer(g_out, self.W2)
        if hid_mask is not None:
            g_h *= hid_mask
        g_h *= pre > 0
        np.dot(X_in.T, g_h, out=self.gW1)
        np.sum(g_h, axis=0, out=self.gb1)
        self.g[self.last] = g_out.sum()
        if lam:
            self.g += (2.0 * lam) * w
            data += lam * float(w @ w)
        return data

    def params(self) -> MLPParams:
        return MLPParams.from_flat(self.w, self.D, self.H)


def train(X: np.ndarray, y: np.ndarray, mlp_cfg: MLPConfig, train_cfg: TrainConfig,
          standardizer: Standardizer, record_loss: bool = False) -> TrainedModel:
    """Run ``train_cfg.epochs`` passes of mini-batch Adam on standardized data.

    Each epoch reshuffles the rows and every batch gets fresh dropout masks.  Only
    the loop itself is timed.  Raises ``TrainingError`` if the loss turns non-finite.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[1] != mlp_cfg.input_dim or X.shape[0] != y.shape[0]:
        raise ValueError(f"training data {X.shape}/{y.shape} inconsistent with input_dim={mlp_cfg.input_dim}")
    init_seed, loop_seed = np.random.SeedSequence(train_cfg.seed).spawn(2)
    params = init_params(mlp_cfg, init_seed)
    if train_cfg.epochs == 0:
        return TrainedModel(params, mlp_cfg, standardizer, 0.0)
    rng = np.random.default_rng(loop_seed)
    net = _FlatNet(params)
    m = np.zeros_like(net.w)
    v = np.zeros_like(net.w)
    lam = mlp_cfg.weight_decay
    d = mlp_cfg.dropout
    keep = 1.0 - d
    n, bs = X.shape[0], train_cfg.batch_size
    t = 0
    history = []
    start = time.perf_counter()
    # Divergence is detected per epoch below, so raw overflow warnings are noise.
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(train_cfg.epochs):
            perm = rng.permutation(n)
            total = 0.0
            for lo in range(0, n, bs):
                idx = perm[lo:lo + bs]
                b = idx.shape[0]
                if d > 0.0:
                    in_mask = (rng.random((b, mlp_cfg.input_dim)) < keep) * (1.0 / keep)
                    hid_mask = (rng.random((b, mlp_cfg.hidden_units)) < keep) * (1.0 / keep)
                else:
                    in_mask = hid_mask = None
                total += net.step_grad(X[idx], y[idx], in_mask, hid_mask, lam) * b
                t += 1
                _adam_update(net.w, net.g, m, v, t, train_cfg)
            if not np.isfinite(total) or not np.isfinite(net.w).all():
                raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
            if record_loss:
                history.append(total / n)
    elapsed = time.perf_counter() - start
    return TrainedModel(net.params(), mlp_cfg, standardizer, elapsed, tuple(history))


_MAGIC = b"UCIBDL-MLP"
_FORMAT_VERSION = 1


def save_model(model: TrainedModel, path: str | Path) -> None:
    """Binary file: magic, version, dims, config scalars, then row-major float64 values."""
    p, c, s = model.params, model.config, model.standardizer
    D, H = p.shapes
    header = _MAGIC + struct.pack("<III", _FORMAT_VERSION, D, H)
    header += struct.pack("<4d", c.dropout, c.lengthscale, c.weight_decay, model.train_wall_time)
    body = np.concatenate([p.flat(), s.feature_means, s.feature_stds, [s.target_mean, s.target_std]])
    Path(path).write_bytes(header + body.astype("<f8").tobytes())


def load_model(path: str | Path) -> TrainedModel:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a model file")
    off = len(_MAGIC)
    version, D, H = struct.unpack_from("<III", raw, off)
    if version != _FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported model format version {version}")
    off += 12
    dropout, lengthscale, wd, wall = struct.unpack_from("<4d", raw, off)
    off += 32
    body = np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64)
    n_p = D * H + 2 * H + 1
    if body.size != n_p + 2 * D + 2:
        raise ValueError(f"{path}: truncated model file")
    params = MLPParams.from_flat(body[:n_p], D, H)
    std = Standardizer(body[n_p:n_p + D].copy(), body[n_p + D:n_p + 2 * D].copy(),
                       float(body[-2]), float(body[-1]))
    cfg = MLPConfig(D, H, dropout, lengthscale, wd)
    return TrainedModel(params, cfg, std, wall)
