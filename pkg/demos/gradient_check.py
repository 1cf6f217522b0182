"""Compare reverse-mode gradients of the GNN with central finite differences on a toy 5-bus ring.

    python demos/gradient_check.py
"""
import numpy as np

from gridcast.autodiff import Tape, Tensor
from gridcast.grid import Branch, Bus, GeneratorSpec, GridGraph
from gridcast.model import GNNModel, ModelConfig, ModelParams, forward_window
from gridcast.training import mse_loss

n, T = 5, 3
buses = [Bus(i, 0, 138.0, "slack" if i == 0 else "pq") for i in range(n)]
branches = [Branch(i, (i + 1) % n, 0.01, 0.1, 100.0) for i in range(n)]
grid = GridGraph(buses, branches, [GeneratorSpec(0, 0.0, 500.0, -200.0, 200.0, "thermal", True)])
cfg = ModelConfig(hidden=8, seq_len=T)
params = GNNModel(cfg, grid, seed=0).params
rng = np.random.default_rng(0)
seq, target = rng.standard_normal((T, n, 4)), rng.standard_normal((n, 4))


def loss_with(p: ModelParams) -> Tensor:
    return mse_loss(forward_window(seq, grid, p, cfg, True, np.random.default_rng(1)), target)


with Tape() as tape:
    loss = loss_with(params)
tape.backward(loss)
print(f"loss {float(loss.data):.6f}")

h = 1e-6
for name, w in params.weights.items():
    if w.grad is None:
        continue
    fd = np.zeros_like(w.data)
    for idx in np.ndindex(w.data.shape):
        for sign in (1, -1):
            p = params.copy()
            p[name].data[idx] += sign * h
            fd[idx] += sign * float(loss_with(p).data) / (2 * h)
    err = np.linalg.norm(w.grad - fd) / max(np.linalg.norm(w.grad), np.linalg.norm(fd), 1e-300)
    print(f"{name:>10s} {str(w.data.shape):>10s}  relative error {err:.2e}")
