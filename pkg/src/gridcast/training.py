"""Normalisation, windowing, optimisation loop and checkpointing."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from gridcast import autodiff as ad
from gridcast import checkpoint as ckpt_io
from gridcast.autodiff import Tensor
from gridcast.dataset import Dataset

log = logging.getLogger(__name__)

NORM_EPS = 1e-8


class TrainingDivergence(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""

    def __init__(self, epoch: int, step: int, value: float):
        self.epoch, self.step, self.value = epoch, step, value
        super().__init__(f"training diverged at epoch {epoch}, step {step} (value {value!r})")


# --- normalisation ------------------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    mu_v: np.ndarray  # (4,)
    sigma_v: np.ndarray
    mu_e: np.ndarray  # (5,)
    sigma_e: np.ndarray
    eps: float = NORM_EPS

    def normalize_nodes(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mu_v) / (self.sigma_v + self.eps)

    def denormalize_nodes(self, x: np.ndarray) -> np.ndarray:
        return x * (self.sigma_v + self.eps) + self.mu_v

    def normalize_edges(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mu_e) / (self.sigma_e + self.eps)

    def denormalize_edges(self, x: np.ndarray) -> np.ndarray:
        return x * (self.sigma_e + self.eps) + self.mu_e

    def as_tensors(self) -> dict[str, np.ndarray]:
        return {"norm.mu_v": self.mu_v, "norm.sigma_v": self.sigma_v, "norm.mu_e": self.mu_e,
                "norm.sigma_e": self.sigma_e, "norm.eps": np.array(self.eps)}

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "NormStats":
        return cls(t["norm.mu_v"], t["norm.sigma_v"], t["norm.mu_e"], t["norm.sigma_e"], float(t["norm.eps"]))

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in self.as_tensors().values():
            h.update(np.asarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def to_json(self) -> str:
        # repr() of a float round-trips exactly
        body = {k.split(".", 1)[1]: [float(v) for v in np.atleast_1d(a)] for k, a in self.as_tensors().items()}
        body["eps"] = self.eps
        body["sha256"] = self.digest()
        return json.dumps(body, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "NormStats":
        d = json.loads(text)
        stats = cls(np.array(d["mu_v"]), np.array(d["sigma_v"]), np.array(d["mu_e"]),
                    np.array(d["sigma_e"]), float(d["eps"]))
        if "sha256" in d and d["sha256"] != stats.digest():
            raise ValueError("normalisation stats file is corrupt (digest mismatch)")
        return stats


def compute_norm_stats(train: Dataset, eps: float = NORM_EPS) -> NormStats:
    """Mean and population std over every (time, node) resp. (time, edge) cell."""
    if len(train) < 2:
        raise ValueError("need at least 2 snapshots to compute normalisation statistics")
    node = train.node.reshape(-1, train.node.shape[-1])
    edge = train.edge.reshape(-1, train.edge.shape[-1])
    return NormStats(*_mean_std(node), *_mean_std(edge), eps)


def _mean_std(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    mu += (x - mu).mean(axis=0)  # second pass: a constant column gets its exact value back
    return mu, np.sqrt(((x - mu) ** 2).mean(axis=0))


def normalize(data: Dataset, stats: NormStats) -> Dataset:
    return Dataset(stats.normalize_nodes(data.node), stats.normalize_edges(data.edge), data.flags.copy())


def denormalize(data: Dataset, stats: NormStats) -> Dataset:
    return Dataset(stats.denormalize_nodes(data.node), stats.denormalize_edges(data.edge), data.flags.copy())


# --- splitting and windows --------------------------------------------------------------

def split_index(n: int, train_frac: float) -> int:
    return int(math.floor(n * train_frac + 1e-9))


def chronological_split(data: Dataset, train_frac: float = 0.8, seq_len: int = 48) -> tuple[Dataset, Dataset]:
    """Prefix/suffix split without shuffling."""
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must be in (0, 1)")
    if len(data) < seq_len + 2:
        raise ValueError(f"series of {len(data)} snapshots is too short for seq_len={seq_len}")
    k = split_index(len(data), train_frac)
    return data[:k], data[k:]


@dataclass(frozen=True)
class SequenceWindow:
    inputs: np.ndarray  # (seq_len, N, 4)
    target: np.ndarray  # (N, 4)
    start: int  # index of the first input snapshot within its split
    edge_inputs: np.ndarray | None = None  # (seq_len, E, 5)

    @property
    def target_index(self) -> int:
        return self.start + self.inputs.shape[0]


def make_windows(split: Dataset | np.ndarray, seq_len: int = 48) -> list[SequenceWindow]:
    """Stride-1 windows; the target is the snapshot right after each window.

    Windows are views into ``split`` (no copies).
    """
    node = split.node if isinstance(split, Dataset) else np.asarray(split)
    edge = split.edge if isinstance(split, Dataset) else None
    if len(node) < seq_len + 1:
        raise ValueError(f"need at least {seq_len + 1} snapshots for seq_len={seq_len}, got {len(node)}")
    return [SequenceWindow(node[s:s + seq_len], node[s + seq_len], s,
                           None if edge is None else edge[s:s + seq_len])
            for s in range(len(node) - seq_len)]


def stack_windows(windows: list[SequenceWindow]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([w.inputs for w in windows]), np.stack([w.target for w in windows])


# --- loss and optimiser -------------------------------------------------------------------

def mse_loss(pred, target) -> Tensor:
    """(1/N) * sum over nodes of the squared error summed over features."""
    pred = ad.as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    d = ad.sub(pred, target)
    return ad.scale(ad.sum_all(ad.mul(d, d)), 1.0 / pred.shape[0])


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_gradients(grads: list[np.ndarray], max_norm: float = 0.5) -> tuple[list[np.ndarray], float]:
    """Rescale all gradients by ``max_norm / norm`` when the global L2 norm exceeds ``max_norm``."""
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        return [g * factor for g in grads], norm
    return list(grads), norm


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    clip_norm: float = 0.5
    epochs: int = 100
    seed: int = 0
    patience: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("lr and clip_norm must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def as_tensors(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array(float(self.step))}
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "AdamState":
        st = cls(step=int(t.get("adam.step", 0)))
        for k, a in t.items():
            if k.startswith("adam.m."):
                st.m[k[7:]] = a.copy()
            elif k.startswith("adam.v."):
                st.v[k[7:]] = a.copy()
        return st


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> None:
    """In-place Adam update with L2 weight decay (``g + wd * w``) and bias correction."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(-1, state.step, float("nan"))
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        w = params[name].data
        if config.weight_decay:
            g = g + config.weight_decay * w
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        w -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


# --- the loop ---------------------------------------------------------------------------

def train_step(model, window: SequenceWindow, config: TrainConfig, state: AdamState,
               rng: np.random.Generator) -> float:
    """One forward/backward/clip/Adam step on a single window; returns the loss."""
    weights = model.params.weights
    for w in weights.values():
        w.grad = None
    with ad.Tape() as tape:
        loss = mse_loss(model.forward(window.inputs, training=True, rng=rng, edge_seq=window.edge_inputs),
                        window.target)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDivergence(-1, state.step, value)
    tape.backward(loss)
    names = list(weights)
    raw = [weights[n].grad if weights[n].grad is not None else np.zeros_like(weights[n].data) for n in names]
    clipped, _ = clip_gradients(raw, config.clip_norm)
    adam_step(weights, dict(zip(names, clipped)), state, config)
    return value


def evaluate_loss(model, windows: list[SequenceWindow]) -> float:
    """Mean per-window loss in eval mode (no dropout, running batch-norm stats)."""
    if not windows:
        return float("nan")
    total = 0.0
    for w in windows:
        pred = model.predict(w.inputs, edge_seq=w.edge_inputs)
        d = pred - w.target
        total += float(np.sum(d * d)) / d.shape[0]
    return total / len(windows)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Per-epoch generator so a resumed run replays the same shuffles and dropout masks."""
    return np.random.default_rng([seed, epoch])


@dataclass
class TrainResult:
    model: object
    best_model: object
    history: list[tuple[int, float, float]]
    best_epoch: int
    stats: NormStats
    state: AdamState

    def loss_csv(self) -> str:
        return loss_csv(self.history)


def loss_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_mse", "val_mse"])
    for e, tr, va in history:
        w.writerow([e, repr(float(tr)), repr(float(va))])
    return buf.getvalue()


def read_loss_csv(path) -> list[tuple[int, float, float]]:
    with open(path, newline="", encoding="utf-8") as f:
        return [(int(r["epoch"]), float(r["train_mse"]), float(r["val_mse"])) for r in csv.DictReader(f)]


def _training_state(state: AdamState, stats: NormStats, epoch: int, best_val: float, best_epoch: int,
                    history) -> dict[str, np.ndarray]:
    out = dict(state.as_tensors())
    out.update(stats.as_tensors())
    out["train.epoch"] = np.array(float(epoch))
    out["train.best_val"] = np.array(best_val)
    out["train.best_epoch"] = np.array(float(best_epoch))
    out["train.history"] = np.array(history, dtype=float).reshape(-1, 3)
    return out


def train(model, train_windows: list[SequenceWindow], val_windows: list[SequenceWindow],
          config: TrainConfig, stats: NormStats, out_dir=None, resume_from=None,
          progress: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """Fit ``model`` (GNN or MLP) one window per optimiser step.

    After each epoch the validation loss is computed in eval mode; the
    best-validation parameters are kept (and written to ``best.ckpt`` when
    ``out_dir`` is given) along with ``last.ckpt`` and ``loss.csv``.
    ``resume_from`` continues from a ``last.ckpt`` and reproduces the
    unbroken run exactly.
    """
    from gridcast import models_io  # local import: models_io depends on this module

    state = AdamState()
    history: list[tuple[int, float, float]] = []
    best_val, best_epoch, start = math.inf, -1, 0
    best_model = model
    if resume_from is not None:
        ck = ckpt_io.load(resume_from)
        loaded = models_io.model_from_checkpoint(ck, getattr(model, "ctx", None))
        model.params = loaded.params
        state = AdamState.from_tensors(ck.state)
        start = int(ck.state["train.epoch"])
        best_val = float(ck.state["train.best_val"])
        best_epoch = int(ck.state["train.best_epoch"])
        history = [(int(e), tr, va) for e, tr, va in ck.state["train.history"]]
        saved = NormStats.from_tensors(ck.state)
        if saved.digest() != stats.digest():
            raise ValueError("resume checkpoint was trained with different normalisation statistics")
        best_path = Path(resume_from).with_name("best.ckpt")
        best_model = models_io.load_model(best_path, getattr(model, "ctx", None)) if best_path.exists() else model
    out = Path(out_dir) if out_dir is not None else None
    stale = start - 1 - best_epoch if history else 0
    for epoch in range(start, config.epochs):
        rng = epoch_rng(config.seed, epoch)
        order = rng.permutation(len(train_windows)) if config.shuffle else np.arange(len(train_windows))
        total = 0.0
        for i, k in enumerate(order):
            try:
                total += train_step(model, train_windows[k], config, state, rng)
            except TrainingDivergence as exc:
                raise TrainingDivergence(epoch, i, exc.value) from None
        train_mse = total / max(len(order), 1)
        val_mse = evaluate_loss(model, val_windows)
        if not math.isfinite(val_mse) and val_windows:
            raise TrainingDivergence(epoch, len(order), val_mse)
        history.append((epoch, train_mse, val_mse))
        if progress is not None:
            progress(epoch, train_mse, val_mse)
        log.info("epoch %d train %.6g val %.6g", epoch, train_mse, val_mse)
        improved = val_mse < best_val or not val_windows
        if improved:
            best_val, best_epoch, stale = val_mse, epoch, 0
            best_model = models_io.clone_model(model)
        else:
            stale += 1
        tstate = _training_state(state, stats, epoch + 1, best_val, best_epoch, history)
        if out is not None:
            if improved:
                models_io.save_model(out / "best.ckpt", best_model, tstate)
            models_io.save_model(out / "last.ckpt", model, tstate)
            (out / "loss.csv").write_text(loss_csv(history), encoding="utf-8")
        if config.patience is not None and stale >= config.patience:
            log.info("early stop after epoch %d", epoch)
            break
    if out is not None:
        (out / "train_config.json").write_text(json.dumps(asdict(config), indent=2, sort_keys=True) + "\n",
                                               encoding="utf-8")
    return TrainResult(model, best_model, history, best_epoch, stats, state)
