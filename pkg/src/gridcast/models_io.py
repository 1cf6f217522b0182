"""Map models to and from the checkpoint envelope."""
from __future__ import annotations

import numpy as np

from gridcast import checkpoint as ckpt_io
from gridcast.autodiff import Tensor
from gridcast.baselines import LinearModel, MLPConfig, MLPModel, RollingMeanConfig, RollingMeanModel
from gridcast.checkpoint import Checkpoint, CheckpointError
from gridcast.model import EDGE_MODES, GNNModel, ModelConfig, ModelParams, param_shapes


def _param_section(params: ModelParams) -> dict[str, np.ndarray]:
    out = {k: t.data for k, t in params.weights.items()}
    out.update(params.buffers)
    return out


def to_checkpoint(model, state: dict[str, np.ndarray] | None = None) -> Checkpoint:
    state = dict(state or {})
    kind = model.kind
    if kind == "gnn":
        c = model.config
        # edge_mode is not a header field; keep it in the state section
        state.setdefault("model.edge_mode", np.array(float(EDGE_MODES.index(c.edge_mode))))
        return Checkpoint(ckpt_io.MAGICS["gnn"], (c.d_v, c.d_e, c.hidden, c.sage_layers, c.seq_len),
                          c.dropout, _param_section(model.params), state)
    if kind == "mlp":
        c = model.config
        return Checkpoint(ckpt_io.MAGICS["mlp"], (c.d_v, 0, c.hidden, c.layers, c.seq_len), 0.0,
                          _param_section(model.params), state)
    if kind == "linear":
        n, d, lag = model.coef.shape
        return Checkpoint(ckpt_io.MAGICS["linear"], (d, 0, lag, 0, model.seq_len), model.ridge,
                          {"coef": model.coef, "intercept": model.intercept}, state)
    if kind == "rolling_mean":
        c = model.config
        return Checkpoint(ckpt_io.MAGICS["rolling_mean"], (0, 0, c.window, 0, c.seq_len), 0.0, {}, state)
    raise CheckpointError(f"cannot serialise model kind {kind!r}")


def _split_params(tensors: dict[str, np.ndarray], expected: dict[str, tuple]) -> ModelParams:
    weights, buffers = {}, {}
    for name, arr in tensors.items():
        if name in expected:
            if arr.shape != expected[name]:
                raise CheckpointError(f"tensor {name} has shape {arr.shape}, expected {expected[name]}")
            weights[name] = Tensor(arr.copy(), True, name)
        else:
            buffers[name] = arr.copy()
    missing = set(expected) - set(weights)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {', '.join(sorted(missing))}")
    return ModelParams(weights, buffers)


def model_from_checkpoint(ck: Checkpoint, grid=None):
    if ck.kind == "gnn":
        d_v, d_e, hidden, layers, seq_len = ck.header
        mode = EDGE_MODES[int(ck.state.get("model.edge_mode", 0))]
        config = ModelConfig(d_v, d_e, hidden, layers, ck.scalar, seq_len, mode)
        if grid is None:
            raise CheckpointError("a grid is needed to rebuild a GNN checkpoint")
        return GNNModel(config, grid, _split_params(ck.params, param_shapes(config)))
    if ck.kind == "mlp":
        d_v, _, hidden, layers, seq_len = ck.header
        config = MLPConfig(d_v, seq_len, hidden, layers)
        w = config.widths
        shapes = {}
        for i in range(len(w) - 1):
            shapes[f"W{i}"] = (w[i + 1], w[i])
            shapes[f"b{i}"] = (w[i + 1],)
        return MLPModel(config, _split_params(ck.params, shapes))
    if ck.kind == "linear":
        return LinearModel(ck.params["coef"].copy(), ck.params["intercept"].copy(), ck.scalar, ck.header[4])
    return RollingMeanModel(RollingMeanConfig(ck.header[2], ck.header[4]))


def save_model(path, model, state: dict[str, np.ndarray] | None = None) -> None:
    ckpt_io.save(path, to_checkpoint(model, state))


def load_model(path, grid=None, expect_kind: str | None = None):
    expect = ckpt_io.MAGICS[expect_kind] if expect_kind else None
    return model_from_checkpoint(ckpt_io.load(path, expect), grid)


def clone_model(model):
    """Deep copy of a trainable model's parameters (grid operators are shared)."""
    if model.kind == "gnn":
        return GNNModel(model.config, model.ctx, model.params.copy())
    if model.kind == "mlp":
        return MLPModel(model.config, model.params.copy())
    raise CheckpointError(f"cannot clone model kind {model.kind!r}")
