"""Tape-based reverse-mode differentiation over dense float64 arrays.

Operations executed while a :class:`Tape` is active, and with at least one
input that requires a gradient, are recorded together with a closure that
maps the output cotangent to input cotangents. ``Tape.backward`` replays the
record in reverse.

Ops accept leading batch dimensions where noted (e.g. a stack of per-timestep
node matrices shaped ``(T, N, d)``); broadcasting is otherwise limited to a
trailing row-vector bias.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

_TAPES: list["Tape"] = []


class AutodiffError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad, name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records differentiable ops; use as a context manager.

    >>> w = tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(mul(w, w))
    >>> tape.backward(loss)
    >>> w.grad
    array([2., 4.])
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        out._tape = self
        self.records.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        if loss._tape is not self:
            raise AutodiffError("loss was not produced on this tape (detached tensor)")
        if self.consumed:
            raise AutodiffError("backward already ran on this tape; start a new Tape")
        if loss.data.size != 1:
            raise AutodiffError(f"loss must be a scalar, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = vjp(g)
            for inp, gi in zip(inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
        self.records.clear()


def backward(loss: Tensor) -> None:
    if loss._tape is None:
        raise AutodiffError("backward on a detached tensor (no tape recorded it)")
    loss._tape.backward(loss)


def _active() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _make(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = _active()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.record(out, tuple(inputs), vjp)
        return out
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_bias(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape:
        return
    trailing_ok = b.ndim <= a.ndim and all(
        bs == 1 or bs == as_ for bs, as_ in zip(reversed(b.shape), reversed(a.shape)))
    row_like = b.ndim == 1 or (b.ndim == 2 and b.shape[0] == 1)
    if not (trailing_ok and row_like):
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# --- linear algebra --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` with ``a`` shaped (..., m, k) and ``b`` (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if B.ndim != 2 or A.ndim < 2 or A.shape[-1] != B.shape[0]:
        raise ValueError(f"matmul: shape mismatch {A.shape} @ {B.shape}")

    def vjp(g):
        ga = g @ B.T if a.requires_grad else None
        gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if b.requires_grad else None
        return ga, gb

    return _make(A @ B, (a, b), vjp)


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    X, W = x.data, w.data
    if W.ndim != 2 or X.shape[-1] != W.shape[1]:
        raise ValueError(f"linear: input width {X.shape[-1]} does not match weight {W.shape}")
    out = X @ W.T
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[0],):
            raise ValueError(f"linear: bias shape {b.shape} != ({W.shape[0]},)")
        out = out + b.data
        inputs.append(b)

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ W if x.requires_grad else None
        gw = g2.T @ X.reshape(-1, X.shape[-1]) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, inputs, vjp)


def concat_cols(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"concat_cols: row mismatch {a.shape} vs {b.shape}")
    p = a.shape[-1]

    def vjp(g):
        return g[..., :p], g[..., p:]

    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), vjp)


# --- elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_bias(a.data, b.data, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_bias(a.data, b.data, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_bias(a.data, b.data, "mul")
    A, B = a.data, b.data
    return _make(A * B, (a, b), lambda g: (g * B, _unbroadcast(g * A, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    """max(x, 0); the derivative at exactly 0 is taken as 0."""
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (out > 0),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free and cheaper than scipy's expit on small arrays
    out = np.multiply(x, 0.5)
    np.tanh(out, out=out)
    out *= 0.5
    out += 0.5
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# --- reductions ------------------------------------------------------------------

def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    return scale(sum_all(a), 1.0 / a.data.size)


# --- graph aggregation -------------------------------------------------------------

class MeanAggregator:
    """Row-normalised in-neighbour matrix for a directed edge list.

    Row ``v`` averages the rows of every distinct ``u`` with an edge
    ``(u, v)``; nodes without in-neighbours aggregate to zero.
    """

    def __init__(self, edges, num_nodes: int):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
            raise IndexError(f"edge index out of range for {num_nodes} nodes")
        pairs = np.unique(edges, axis=0) if edges.size else edges
        src, dst = pairs[:, 0], pairs[:, 1]
        indeg = np.bincount(dst, minlength=num_nodes).astype(float)
        w = 1.0 / indeg[dst] if len(dst) else np.zeros(0)
        self.num_nodes = num_nodes
        self.matrix = sp.csr_matrix((w, (dst, src)), shape=(num_nodes, num_nodes))
        self.matrix_t = self.matrix.T.tocsr()
        self.in_degree = indeg


def _spmm_nodes(M: sp.csr_matrix, h: np.ndarray) -> np.ndarray:
    """Apply M along the node axis (-2) of h shaped (..., N, d)."""
    if h.ndim == 2:
        return np.asarray(M @ h)
    lead = h.shape[:-2]
    N, d = h.shape[-2:]
    moved = np.moveaxis(h.reshape(-1, N, d), 1, 0).reshape(N, -1)
    out = np.asarray(M @ moved).reshape(M.shape[0], -1, d)
    return np.moveaxis(out, 0, 1).reshape(*lead, M.shape[0], d)


def sparse_rows(h, matrix: sp.spmatrix) -> Tensor:
    """Multiply a constant sparse matrix into the node axis of ``h``."""
    h = as_tensor(h)
    M = sp.csr_matrix(matrix)
    if h.shape[-2] != M.shape[1]:
        raise ValueError(f"sparse_rows: matrix {M.shape} vs node axis {h.shape[-2]}")
    Mt = M.T.tocsr()
    return _make(_spmm_nodes(M, h.data), (h,), lambda g: (_spmm_nodes(Mt, g),))


def neighbor_mean(h, edges, num_nodes: int | None = None) -> Tensor:
    """Mean of in-neighbour rows: out[v] = mean(h[u] for (u, v) in edges)."""
    h = as_tensor(h)
    agg = edges if isinstance(edges, MeanAggregator) else MeanAggregator(edges, num_nodes or h.shape[-2])
    if agg.num_nodes != h.shape[-2]:
        raise ValueError(f"neighbor_mean: aggregator has {agg.num_nodes} nodes, input {h.shape[-2]}")
    M, Mt = agg.matrix, agg.matrix_t
    return _make(_spmm_nodes(M, h.data), (h,), lambda g: (_spmm_nodes(Mt, g),))


# --- regularisation / normalisation --------------------------------------------------

def dropout(h, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    h = as_tensor(h)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return h
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(h.shape, dtype=np.float32) >= rate) * (1.0 / (1.0 - rate))
    return _make(h.data * keep, (h,), lambda g: (g * keep,))


def batch_norm(h, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray, training: bool,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-column normalisation over the node axis (-2).

    In training mode every leading index (e.g. every timestep of a
    ``(T, N, d)`` stack) is its own batch; running statistics are updated in
    place, one exponential-average step per batch in order, using the
    unbiased variance. Eval mode uses the running statistics.
    """
    h, gamma, beta = as_tensor(h), as_tensor(gamma), as_tensor(beta)
    X = h.data
    d = X.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"batch_norm: gamma/beta must have shape ({d},)")
    G = gamma.data
    if training:
        N = X.shape[-2]
        if N < 2:
            raise ValueError("batch_norm needs at least 2 rows in training mode")
        mu = X.mean(axis=-2, keepdims=True)
        xc = X - mu
        var = (xc * xc).mean(axis=-2, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        unbiased = var.reshape(-1, d) * (N / (N - 1))
        # k sequential EMA steps folded into one weighted sum
        k = unbiased.shape[0]
        decay = (1.0 - momentum) ** np.arange(k - 1, -1, -1)
        running_mean *= (1.0 - momentum) ** k
        running_mean += momentum * (decay @ mu.reshape(-1, d))
        running_var *= (1.0 - momentum) ** k
        running_var += momentum * (decay @ unbiased)

        def vjp(g):
            gx = None
            if h.requires_grad:
                dxhat = g * G
                gx = inv * (dxhat - dxhat.mean(axis=-2, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=-2, keepdims=True))
            flat_g = g.reshape(-1, d)
            return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (X - running_mean) * inv

        def vjp(g):
            flat_g = g.reshape(-1, d)
            return g * (G * inv), (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _make(xhat * G + beta.data, (h, gamma, beta), vjp)


# --- recurrent cells --------------------------------------------------------------------

def _gru_gates(gi: np.ndarray, gh: np.ndarray, H: int):
    rz = _sigmoid(gi[..., :2 * H] + gh[..., :2 * H])
    r, z = rz[..., :H], rz[..., H:]
    ghn = gh[..., 2 * H:]
    n = np.tanh(gi[..., 2 * H:] + r * ghn)
    return r, z, n, ghn


def _gru_step_grads(g, h_prev, r, z, n, ghn):
    """Cotangents of one GRU step w.r.t. the pre-activations and h_prev."""
    dn = g * z
    dh = g * (1.0 - z)
    dz = g * (n - h_prev)
    da_n = dn * (1.0 - n * n)
    da_z = dz * z * (1.0 - z)
    da_r = da_n * ghn * r * (1.0 - r)
    dgi = np.concatenate([da_r, da_z, da_n], axis=-1)
    dgh = np.concatenate([da_r, da_z, da_n * r], axis=-1)
    return dgi, dgh, dh


def gru_cell(h_prev, x, w_ih, w_hh, b_ih, b_hh) -> Tensor:
    """One GRU step.

    Gate blocks are stacked as ``[reset, update, candidate]`` in the rows of
    ``w_ih`` (3H, D) and ``w_hh`` (3H, H)::

        r  = sigmoid(x W_ir' + b_ir + h W_hr' + b_hr)
        z  = sigmoid(x W_iz' + b_iz + h W_hz' + b_hz)
        n  = tanh(x W_in' + b_in + r * (h W_hn' + b_hn))
        h' = (1 - z) * h + z * n
    """
    h_prev, x, w_ih, w_hh, b_ih, b_hh = map(as_tensor, (h_prev, x, w_ih, w_hh, b_ih, b_hh))
    H = h_prev.shape[-1]
    if w_hh.shape != (3 * H, H) or w_ih.shape != (3 * H, x.shape[-1]) or h_prev.shape[:-1] != x.shape[:-1]:
        raise ValueError(f"gru_cell: shape mismatch h{h_prev.shape} x{x.shape} "
                         f"w_ih{w_ih.shape} w_hh{w_hh.shape}")
    Hp, X = h_prev.data, x.data
    gi = X @ w_ih.data.T + b_ih.data
    gh = Hp @ w_hh.data.T + b_hh.data
    r, z, n, ghn = _gru_gates(gi, gh, H)
    out = (1.0 - z) * Hp + z * n

    def vjp(g):
        dgi, dgh, dh = _gru_step_grads(g, Hp, r, z, n, ghn)
        dh = dh + dgh @ w_hh.data
        return (dh, dgi @ w_ih.data, dgi.T @ X, dgh.T @ Hp, dgi.sum(axis=0), dgh.sum(axis=0))

    return _make(out, (h_prev, x, w_ih, w_hh, b_ih, b_hh), vjp)


def gru_sequence(xs, h0, w_ih, w_hh, b_ih, b_hh) -> Tensor:
    """Run :func:`gru_cell` over ``xs`` shaped (T, N, D); returns the final (N, H) state.

    Recorded as a single tape entry with backpropagation through time.
    """
    xs, h0, w_ih, w_hh, b_ih, b_hh = map(as_tensor, (xs, h0, w_ih, w_hh, b_ih, b_hh))
    T, N, D = xs.shape
    H = h0.shape[-1]
    if w_hh.shape != (3 * H, H) or w_ih.shape != (3 * H, D) or h0.shape != (N, H):
        raise ValueError("gru_sequence: shape mismatch")
    Wih, Whh = w_ih.data, w_hh.data
    GI = xs.data @ Wih.T + b_ih.data  # (T, N, 3H)
    hs = np.empty((T + 1, N, H))
    hs[0] = h0.data
    cache = []
    for t in range(T):
        gh = hs[t] @ Whh.T + b_hh.data
        r, z, n, ghn = _gru_gates(GI[t], gh, H)
        hs[t + 1] = (1.0 - z) * hs[t] + z * n
        cache.append((r, z, n, ghn))

    def vjp(g):
        dGI = np.empty_like(GI)
        dGH = np.empty_like(GI)
        dh = g
        for t in range(T - 1, -1, -1):
            r, z, n, ghn = cache[t]
            dn = dh * z
            da_n = dn * (1.0 - n * n)
            da_z = dh * (n - hs[t]) * z * (1.0 - z)
            da_r = da_n * ghn * r * (1.0 - r)
            dGI[t, :, :H] = da_r
            dGI[t, :, H:2 * H] = da_z
            dGI[t, :, 2 * H:] = da_n
            dGH[t, :, :2 * H] = dGI[t, :, :2 * H]
            np.multiply(da_n, r, out=dGH[t, :, 2 * H:])
            dh = dh * (1.0 - z) + dGH[t] @ Whh
        flat = dGI.reshape(-1, 3 * H)
        flat_h = dGH.reshape(-1, 3 * H)
        dWhh = flat_h.T @ hs[:T].reshape(-1, H)
        dxs = dGI @ Wih if xs.requires_grad else None
        return dxs, dh, flat.T @ xs.data.reshape(-1, D), dWhh, flat.sum(axis=0), flat_h.sum(axis=0)

    return _make(hs[T].copy(), (xs, h0, w_ih, w_hh, b_ih, b_hh), vjp)
