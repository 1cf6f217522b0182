"""End-to-end helpers shared by the command line and the benchmark."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from gridcast.baselines import MLPConfig, MLPModel, RollingMeanConfig, RollingMeanModel, fit_linear
from gridcast.dataset import Dataset, GenerationOptions, generate_dataset
from gridcast.evaluation import EvalReport, from_predictions, strata_masks
from gridcast.grid import GridGraph, build_nrel118_like, node_degrees
from gridcast.model import GNNModel, ModelConfig
from gridcast.profiles import ProfileSeries, synthesize_profiles
from gridcast.training import (NormStats, SequenceWindow, TrainConfig, TrainResult, chronological_split,
                               compute_norm_stats, make_windows, normalize, split_index, train)

log = logging.getLogger(__name__)

REPORT_NAMES = {"gnn": "GNN", "mlp": "NN", "linear": "LR", "rolling_mean": "RM"}


@dataclass
class Prepared:
    """Normalised splits and their windows."""

    stats: NormStats
    train: Dataset
    val: Dataset
    train_windows: list[SequenceWindow]
    val_windows: list[SequenceWindow]
    split: int  # index of the first validation snapshot in the full series


def prepare(data: Dataset, seq_len: int = 48, train_frac: float = 0.8, use_edges: bool = False) -> Prepared:
    train_raw, val_raw = chronological_split(data, train_frac, seq_len)
    stats = compute_norm_stats(train_raw)
    tr, va = normalize(train_raw, stats), normalize(val_raw, stats)
    tw = make_windows(tr if use_edges else tr.node, seq_len)
    vw = make_windows(va if use_edges else va.node, seq_len)
    return Prepared(stats, tr, va, tw, vw, split_index(len(data), train_frac))


def predict_windows(model, windows: list[SequenceWindow]) -> np.ndarray:
    """Stacked (W, N, 4) predictions in normalised space."""
    return np.stack([model.predict(w.inputs, edge_seq=w.edge_inputs) for w in windows])


def validation_targets(prep: Prepared) -> np.ndarray:
    return np.stack([w.target for w in prep.val_windows])


def validation_strata(profiles: ProfileSeries | None, prep: Prepared) -> dict[str, np.ndarray]:
    if profiles is None:
        return {}
    idx = np.array([prep.split + w.target_index for w in prep.val_windows])
    if idx.max() >= profiles.horizon:
        return {}
    return strata_masks(profiles.load.sum(axis=0)[idx], profiles.renewable_share()[idx])


def build_report(models: dict[str, object], prep: Prepared, grid: GridGraph,
                 profiles: ProfileSeries | None = None, meta=None) -> EvalReport:
    """Evaluate every model on the same validation windows, in physical units."""
    y = prep.stats.denormalize_nodes(validation_targets(prep))
    preds = {name: prep.stats.denormalize_nodes(predict_windows(m, prep.val_windows)) for name, m in models.items()}
    return from_predictions(preds, y, node_degrees(grid), prep.stats.sigma_v + prep.stats.eps,
                            validation_strata(profiles, prep), meta)


@dataclass
class BenchmarkRun:
    seed: int
    report: EvalReport
    histories: dict[str, list] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def mean_rmse(self) -> dict[str, np.ndarray]:
        return {m: r.mean(axis=0) for m, r in self.report.rmse.items()}


def run_benchmark(seed: int, hours: int = 2160, epochs: int = 3, grid_seed: int | None = None,
                  model_config: ModelConfig = ModelConfig(), mlp_config: MLPConfig = MLPConfig(),
                  train_config: TrainConfig | None = None, progress=None) -> BenchmarkRun:
    """Generate a dataset, train GNN and MLP, fit the AR baseline and evaluate all four."""
    timings = {}
    t0 = time.perf_counter()
    grid = build_nrel118_like(seed if grid_seed is None else grid_seed)
    profiles = synthesize_profiles(grid, hours, seed)
    data = generate_dataset(grid, profiles, GenerationOptions(seed=seed))
    timings["generate"] = time.perf_counter() - t0
    seq_len = model_config.seq_len
    prep = prepare(data, seq_len)
    lags = min(24, seq_len)  # a day of history, capped by shorter windows
    cfg = train_config or TrainConfig(epochs=epochs, seed=seed)

    t0 = time.perf_counter()
    mlp = train(MLPModel(replace(mlp_config, seq_len=seq_len), seed=seed), prep.train_windows, prep.val_windows, cfg, prep.stats,
                progress=progress and (lambda e, a, b: progress("mlp", e, a, b)))
    timings["mlp"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    gnn = train(GNNModel(model_config, grid, seed=seed), prep.train_windows, prep.val_windows, cfg, prep.stats,
                progress=progress and (lambda e, a, b: progress("gnn", e, a, b)))
    timings["gnn"] = time.perf_counter() - t0
    lin = fit_linear(prep.train.node, lags, 1e-6, seq_len)
    models = {"GNN": gnn.best_model, "NN": mlp.best_model, "LR": lin,
              "RM": RollingMeanModel(RollingMeanConfig(lags, seq_len))}
    t0 = time.perf_counter()
    report = build_report(models, prep, grid, profiles, {"seed": seed, "hours": hours, "epochs": cfg.epochs})
    timings["evaluate"] = time.perf_counter() - t0
    return BenchmarkRun(seed, report, {"GNN": gnn.history, "NN": mlp.history}, timings)
