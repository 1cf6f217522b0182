"""GraphSAGE + GRU next-step state model.

Per timestep: node embedding -> 2 x (SAGE mean aggregation, batch norm, ReLU,
dropout). The per-node embeddings of the window are then fed through a GRU
(each node is an independent sequence sharing weights) and the final hidden
state is mapped back to the four node features.

Weights use the (out, in) layout, i.e. a layer computes ``x @ W.T + b``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from gridcast import autodiff as ad
from gridcast.autodiff import MeanAggregator, Tensor
from gridcast.grid import GridGraph

EDGE_MODES = ("ignore", "mean_inject")


@dataclass(frozen=True)
class ModelConfig:
    d_v: int = 4
    d_e: int = 5
    hidden: int = 32
    sage_layers: int = 2
    dropout: float = 0.1
    seq_len: int = 48
    edge_mode: str = "ignore"

    def __post_init__(self):
        if self.hidden <= 0 or self.seq_len < 1 or self.sage_layers < 1:
            raise ValueError("hidden, seq_len and sage_layers must be positive")
        if self.edge_mode not in EDGE_MODES:
            raise ValueError(f"edge_mode must be one of {EDGE_MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass
class ModelParams:
    """Learnable tensors plus batch-norm running statistics."""

    weights: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.weights[name]

    def trainable(self) -> list[Tensor]:
        return list(self.weights.values())

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), True, k) for k, v in self.weights.items()},
                           {k: v.copy() for k, v in self.buffers.items()})


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    H = config.hidden
    shapes = {"W_v": (H, config.d_v), "b_v": (H,), "W_e": (H, config.d_e), "b_e": (H,)}
    for l in range(1, config.sage_layers + 1):
        shapes[f"W_sage{l}"] = (H, 2 * H)
        shapes[f"bn{l}.gamma"] = (H,)
        shapes[f"bn{l}.beta"] = (H,)
    shapes.update({"gru.W_ih": (3 * H, H), "gru.W_hh": (3 * H, H), "gru.b_ih": (3 * H,),
                   "gru.b_hh": (3 * H,), "W_o": (config.d_v, H), "b_o": (config.d_v,)})
    return shapes


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); batch-norm scale 1, shift 0."""
    rng = np.random.default_rng(seed)
    H = config.hidden
    fan_in = {"W_v": config.d_v, "b_v": config.d_v, "W_e": config.d_e, "b_e": config.d_e,
              "W_o": H, "b_o": H}
    weights = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            data = np.ones(shape)
        elif name.endswith(".beta"):
            data = np.zeros(shape)
        elif name.startswith("gru."):
            data = _uniform(rng, shape, H)
        elif name.startswith("W_sage"):
            data = _uniform(rng, shape, 2 * H)
        else:
            data = _uniform(rng, shape, fan_in[name])
        weights[name] = Tensor(data, requires_grad=True, name=name)
    buffers = {}
    for l in range(1, config.sage_layers + 1):
        buffers[f"bn{l}.running_mean"] = np.zeros(H)
        buffers[f"bn{l}.running_var"] = np.ones(H)
    return ModelParams(weights, buffers)


class GraphContext:
    """Sparse operators derived once from a grid."""

    def __init__(self, grid: GridGraph):
        self.grid = grid
        self.n_bus = grid.n_bus
        self.aggregator = MeanAggregator(grid.directed_edges, grid.n_bus)
        # node <- incident branch mean (for edge_mode="mean_inject")
        E = grid.n_branch
        rows = np.concatenate([grid.from_idx, grid.to_idx])
        cols = np.concatenate([np.arange(E), np.arange(E)])
        inc = sp.csr_matrix((np.ones(2 * E), (rows, cols)), shape=(grid.n_bus, E))
        deg = np.asarray(inc.sum(axis=1)).ravel()
        self.incident_mean = sp.diags(np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)) @ inc


def as_context(grid) -> GraphContext:
    return grid if isinstance(grid, GraphContext) else GraphContext(grid)


def embed_nodes(x, params: ModelParams) -> Tensor:
    x = ad.as_tensor(x)
    if x.shape[-1] != params["W_v"].shape[1]:
        raise ValueError(f"node features have width {x.shape[-1]}, expected {params['W_v'].shape[1]}")
    return ad.relu(ad.linear(x, params["W_v"], params["b_v"]))


def embed_edges(x_e, params: ModelParams) -> Tensor:
    x_e = ad.as_tensor(x_e)
    if x_e.shape[-1] != params["W_e"].shape[1]:
        raise ValueError(f"edge features have width {x_e.shape[-1]}, expected {params['W_e'].shape[1]}")
    return ad.relu(ad.linear(x_e, params["W_e"], params["b_e"]))


def sage_layer(h, grid, params: ModelParams, layer: int, training: bool, dropout: float = 0.0,
               rng: np.random.Generator | None = None) -> Tensor:
    """relu(batchnorm([h || mean_neighbours(h)] @ W.T)) followed by dropout."""
    ctx = as_context(grid)
    h = ad.as_tensor(h)
    agg = ad.neighbor_mean(h, ctx.aggregator)
    pre = ad.linear(ad.concat_cols(h, agg), params[f"W_sage{layer}"])
    normed = ad.batch_norm(pre, params[f"bn{layer}.gamma"], params[f"bn{layer}.beta"],
                           params.buffers[f"bn{layer}.running_mean"],
                           params.buffers[f"bn{layer}.running_var"], training)
    return ad.dropout(ad.relu(normed), dropout, training, rng)


def spatial_forward(node_x, grid, params: ModelParams, config: ModelConfig, training: bool,
                    rng: np.random.Generator | None = None, edge_x=None) -> Tensor:
    """Embedding + stacked SAGE layers; accepts (N, d_v) or (T, N, d_v)."""
    ctx = as_context(grid)
    h = embed_nodes(node_x, params)
    if config.edge_mode == "mean_inject":
        if edge_x is None:
            raise ValueError("edge_mode='mean_inject' needs edge features")
        h = ad.add(h, ad.sparse_rows(embed_edges(edge_x, params), ctx.incident_mean))
    for layer in range(1, config.sage_layers + 1):
        h = sage_layer(h, ctx, params, layer, training, config.dropout, rng)
    return h


def gru_cell(h_prev, z_in, params: ModelParams) -> Tensor:
    return ad.gru_cell(h_prev, z_in, params["gru.W_ih"], params["gru.W_hh"],
                       params["gru.b_ih"], params["gru.b_hh"])


def output_head(h, params: ModelParams) -> Tensor:
    return ad.linear(h, params["W_o"], params["b_o"])


def forward_window(node_seq, grid, params: ModelParams, config: ModelConfig, training: bool = False,
                   rng: np.random.Generator | None = None, edge_seq=None) -> Tensor:
    """Predict the next-step (N, d_v) node features from a (seq_len, N, d_v) window.

    Output is in the same (normalised) space as the inputs.
    """
    node_seq = ad.as_tensor(node_seq)
    if node_seq.data.ndim != 3 or node_seq.shape[0] != config.seq_len:
        raise ValueError(f"window must be shaped ({config.seq_len}, N, {config.d_v}), got {node_seq.shape}")
    ctx = as_context(grid)
    z = spatial_forward(node_seq, ctx, params, config, training, rng, edge_seq)
    h0 = np.zeros((node_seq.shape[1], config.hidden))
    h = ad.gru_sequence(z, h0, params["gru.W_ih"], params["gru.W_hh"], params["gru.b_ih"], params["gru.b_hh"])
    return output_head(h, params)


class GNNModel:
    """Bundles config, parameters and grid operators for training/evaluation."""

    kind = "gnn"

    def __init__(self, config: ModelConfig, grid, params: ModelParams | None = None, seed: int = 0):
        self.config = config
        self.ctx = as_context(grid)
        self.params = params if params is not None else init_params(config, seed)

    def forward(self, node_seq, training: bool = False, rng=None, edge_seq=None) -> Tensor:
        return forward_window(node_seq, self.ctx, self.params, self.config, training, rng, edge_seq)

    def predict(self, node_seq, edge_seq=None) -> np.ndarray:
        return self.forward(node_seq, training=False, edge_seq=edge_seq).data
