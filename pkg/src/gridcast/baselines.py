"""Reference forecasters: trailing mean, per-bus autoregression, per-bus MLP.

All three work in the same normalised space as the GNN and take a
``(seq_len, N, 4)`` window, returning an ``(N, 4)`` next-step prediction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gridcast import autodiff as ad
from gridcast.autodiff import Tensor
from gridcast.model import ModelParams


class InsufficientHistory(ValueError):
    pass


# --- rolling mean ------------------------------------------------------------------------

@dataclass(frozen=True)
class RollingMeanConfig:
    window: int = 24
    seq_len: int = 48

    def __post_init__(self):
        if not 1 <= self.window <= self.seq_len:
            raise ValueError("rolling-mean window must be in [1, seq_len]")


def rolling_mean_predict(window_states: np.ndarray, window: int = 24) -> np.ndarray:
    """Average of the last ``window`` snapshots of a (T, N, d) history."""
    x = np.asarray(window_states, dtype=float)
    if x.shape[0] < window:
        raise InsufficientHistory(f"rolling mean needs {window} snapshots, got {x.shape[0]}")
    return x[-window:].mean(axis=0)


class RollingMeanModel:
    kind = "rolling_mean"

    def __init__(self, config: RollingMeanConfig = RollingMeanConfig()):
        self.config = config

    def predict(self, node_seq, edge_seq=None) -> np.ndarray:
        return rolling_mean_predict(node_seq, self.config.window)


# --- per-bus autoregression ------------------------------------------------------------------

@dataclass
class LinearModel:
    """``coef[n, f, k]`` multiplies the value ``k + 1`` steps back."""

    coef: np.ndarray  # (N, d, lag)
    intercept: np.ndarray  # (N, d)
    ridge: float = 1e-6
    seq_len: int = 48
    kind = "linear"

    @property
    def lag_order(self) -> int:
        return self.coef.shape[-1]

    def predict(self, node_seq, edge_seq=None) -> np.ndarray:
        return predict_linear(self, node_seq)


def _lag_design(series: np.ndarray, lag: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows t = lag..T-1: X[..., t, k] = series[t - 1 - k]; y = series[t]."""
    T = series.shape[0]
    X = np.stack([series[lag - 1 - k:T - 1 - k] for k in range(lag)], axis=-1)  # (M, N, d, lag)
    return X, series[lag:]


def fit_linear(series, lag_order: int = 24, ridge: float = 1e-6, seq_len: int = 48) -> LinearModel:
    """Ridge-regularised least squares per (bus, feature) on its own lagged values.

    ``series`` is a (T, N, d) array (or a Dataset) from the training split.
    The intercept is not penalised.
    """
    x = np.asarray(getattr(series, "node", series), dtype=float)
    if x.ndim == 1:
        x = x[:, None, None]
    if lag_order < 1 or lag_order > seq_len:
        raise ValueError("lag_order must be in [1, seq_len]")
    if x.shape[0] <= lag_order + 1:
        raise InsufficientHistory(f"need more than {lag_order + 1} snapshots to fit lag {lag_order}")
    X, y = _lag_design(x, lag_order)
    M = X.shape[0]
    # batch over (N, d): design (N, d, M, lag + 1)
    A = np.concatenate([np.moveaxis(X, 0, 2), np.ones((*X.shape[1:3], M, 1))], axis=-1)
    b = np.moveaxis(y, 0, 2)  # (N, d, M)
    gram = np.einsum("ndmi,ndmj->ndij", A, A)
    rhs = np.einsum("ndmi,ndm->ndi", A, b)
    pen = np.full(lag_order + 1, ridge)
    pen[-1] = 0.0
    gram = gram + np.diag(pen)
    beta = np.linalg.solve(gram, rhs[..., None])[..., 0]
    return LinearModel(beta[..., :-1], beta[..., -1], ridge, seq_len)


def predict_linear(model: LinearModel, window_states) -> np.ndarray:
    x = np.asarray(window_states, dtype=float)
    p = model.lag_order
    if x.shape[0] < p:
        raise InsufficientHistory(f"linear model needs {p} snapshots, got {x.shape[0]}")
    lags = x[::-1][:p]  # lags[k] is k + 1 steps back
    return np.einsum("knd,ndk->nd", lags, model.coef) + model.intercept


# --- per-bus MLP --------------------------------------------------------------------------------

@dataclass(frozen=True)
class MLPConfig:
    d_v: int = 4
    seq_len: int = 48
    hidden: int = 64
    layers: int = 2  # hidden layers of width ``hidden``

    def __post_init__(self):
        if self.hidden <= 0 or self.layers < 1 or self.seq_len < 1:
            raise ValueError("hidden, layers and seq_len must be positive")

    @property
    def widths(self) -> list[int]:
        return [self.seq_len * self.d_v] + [self.hidden] * self.layers + [self.d_v]


def init_mlp_params(config: MLPConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    weights = {}
    w = config.widths
    for i in range(len(w) - 1):
        bound = 1.0 / np.sqrt(w[i])
        weights[f"W{i}"] = Tensor(rng.uniform(-bound, bound, (w[i + 1], w[i])), True, f"W{i}")
        weights[f"b{i}"] = Tensor(rng.uniform(-bound, bound, w[i + 1]), True, f"b{i}")
    return ModelParams(weights)


def flatten_history(node_seq: np.ndarray) -> np.ndarray:
    """(T, N, d) -> (N, T*d), oldest step first."""
    x = np.asarray(node_seq, dtype=float)
    return np.ascontiguousarray(np.swapaxes(x, 0, 1)).reshape(x.shape[1], -1)


class MLPModel:
    """Shared-weight MLP applied to each bus's flattened history."""

    kind = "mlp"

    def __init__(self, config: MLPConfig = MLPConfig(), params: ModelParams | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_mlp_params(config, seed)

    def forward(self, node_seq, training: bool = False, rng=None, edge_seq=None) -> Tensor:
        x = ad.as_tensor(node_seq)
        if x.data.ndim != 3 or x.shape[0] != self.config.seq_len or x.shape[2] != self.config.d_v:
            raise ValueError(f"window must be shaped ({self.config.seq_len}, N, {self.config.d_v}), got {x.shape}")
        h = Tensor(flatten_history(x.data))
        n_layers = len(self.config.widths) - 1
        for i in range(n_layers):
            h = ad.linear(h, self.params[f"W{i}"], self.params[f"b{i}"])
            if i < n_layers - 1:
                h = ad.relu(h)
        return h

    def predict(self, node_seq, edge_seq=None) -> np.ndarray:
        return self.forward(node_seq).data
