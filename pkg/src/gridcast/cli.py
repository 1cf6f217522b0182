"""Command-line entry point: generate, train, evaluate, predict, report.

Exit codes: 0 ok, 1 usage / invalid input, 2 data generation failed,
3 training diverged, 4 evaluation artifacts missing or inconsistent.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from gridcast import checkpoint as ckpt_io
from gridcast.baselines import MLPConfig, MLPModel, RollingMeanConfig, RollingMeanModel, fit_linear
from gridcast.checkpoint import CheckpointError
from gridcast.dataset import NODE_FEATURES, Dataset, DatasetGenerationError, GenerationOptions, generate_dataset
from gridcast.evaluation import ReportError, emit_report, from_predictions
from gridcast.grid import GridError, build_nrel118_like, read_grid_dir, write_grid
from gridcast.model import GNNModel, ModelConfig
from gridcast.models_io import load_model, save_model
from gridcast.pipeline import REPORT_NAMES, build_report, predict_windows, prepare, validation_strata
from gridcast.profiles import ProfileParams, ProfileSeries, synthesize_profiles
from gridcast.training import NormStats, TrainConfig, TrainingDivergence, train

log = logging.getLogger("gridcast")

EXIT_OK, EXIT_USAGE, EXIT_GENERATE, EXIT_TRAIN, EXIT_EVAL = 0, 1, 2, 3, 4
TRAINABLE = ("gnn", "mlp", "linear")
ALL_KINDS = ("gnn", "mlp", "linear", "rolling_mean")
CKPT_FILES = {"gnn": "gnn/best.ckpt", "mlp": "mlp/best.ckpt", "linear": "linear/model.ckpt",
              "rolling_mean": "rolling_mean/model.ckpt"}
PRED_UNITS = {"v_mag": "v_mag_pu", "v_ang_deg": "v_ang_deg", "p_mw": "p_mw", "q_mvar": "q_mvar"}


class UsageError(Exception):
    pass


class CliExit(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- configuration ---------------------------------------------------------------------------

def load_config(path) -> dict:
    """JSON key/value tree; flags given on the command line take precedence."""
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    return cfg


def pick(args, name: str, cfg: dict, key: str, default=None):
    """Flag value, else ``cfg[key]`` (dotted path), else default."""
    val = getattr(args, name, None)
    if val is not None:
        return val
    node = cfg
    for part in key.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def resolve_seed(args, cfg: dict) -> int:
    seed = pick(args, "seed", cfg, "seed")
    if seed is None:
        env = os.environ.get("GRIDCAST_SEED")
        if env is not None:
            try:
                seed = int(env)
            except ValueError:
                raise UsageError(f"GRIDCAST_SEED must be an integer, got {env!r}") from None
    return 0 if seed is None else int(seed)


def model_config(args, cfg: dict) -> ModelConfig:
    m = cfg.get("model", {})
    return ModelConfig(hidden=int(pick(args, "hidden", cfg, "model.hidden", 32)),
                       sage_layers=int(m.get("sage_layers", 2)),
                       dropout=float(pick(args, "dropout", cfg, "model.dropout", 0.1)),
                       seq_len=int(pick(args, "seq_len", cfg, "model.seq_len", 48)),
                       edge_mode=str(pick(args, "edge_mode", cfg, "model.edge_mode", "ignore")))


def train_config(args, cfg: dict, seed: int) -> TrainConfig:
    return TrainConfig(lr=float(pick(args, "lr", cfg, "train.lr", 1e-4)),
                       weight_decay=float(pick(args, "weight_decay", cfg, "train.weight_decay", 1e-5)),
                       clip_norm=float(pick(args, "clip_norm", cfg, "train.clip_norm", 0.5)),
                       epochs=int(pick(args, "epochs", cfg, "train.epochs", 100)),
                       seed=seed, patience=pick(args, "patience", cfg, "train.patience", None))


def grid_from(source: str, grid_seed: int):
    if source == "nrel118":
        return build_nrel118_like(grid_seed)
    path = Path(source)
    if not path.is_dir():
        raise UsageError(f"--grid must be 'nrel118' or a directory with bus.csv/branch.csv/gen.csv: {source}")
    return read_grid_dir(path)


def _read_data_dir(data_dir: Path):
    missing = [n for n in ("grid/bus.csv", "grid/branch.csv", "grid/gen.csv", "bus_states.csv",
                           "branch_states.csv") if not (data_dir / n).exists()]
    if missing:
        raise CliExit(EXIT_EVAL, f"dataset directory {data_dir} is missing: {', '.join(missing)}")
    grid = read_grid_dir(data_dir / "grid")
    data = Dataset.load(data_dir)
    profiles = ProfileSeries.from_csv(data_dir / "profiles.csv") if (data_dir / "profiles.csv").exists() else None
    return grid, data, profiles


# --- commands -------------------------------------------------------------------------------------

def cmd_generate(args, cfg: dict) -> int:
    seed = resolve_seed(args, cfg)
    hours = int(pick(args, "hours", cfg, "horizon_hours", 2160))
    seq_len = int(pick(args, "seq_len", cfg, "model.seq_len", 48))
    if hours < seq_len + 1:
        raise UsageError(f"--hours must be at least seq_len + 1 = {seq_len + 1} (got {hours})")
    source = str(pick(args, "grid", cfg, "grid.source", "nrel118"))
    grid_seed = int(pick(args, "grid_seed", cfg, "grid.seed", seed))
    out = Path(pick(args, "out", cfg, "out", "data"))
    pp = ProfileParams(**cfg.get("profiles", {}))
    grid = grid_from(source, grid_seed)
    profiles = synthesize_profiles(grid, hours, seed, pp)
    try:
        data = generate_dataset(grid, profiles, GenerationOptions(seed=seed))
    except DatasetGenerationError as exc:
        for t, msg in sorted(exc.failures.items()):
            print(f"t={t}: {msg}", file=sys.stderr)
        raise CliExit(EXIT_GENERATE, str(exc)) from exc
    write_grid(grid, out / "grid")
    data.save(out)
    (out / "profiles.csv").write_text(profiles.to_csv(), encoding="utf-8")
    meta = {"grid": source, "grid_seed": grid_seed, "hours": hours, "seed": seed, "profiles": pp.__dict__}
    (out / "generate.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    rescaled = int((data.flags > 0).sum())
    print(f"generated {len(data)} snapshots ({grid.n_bus} buses, {grid.n_branch} branches) in {out}; "
          f"{rescaled} timestep(s) needed injection rescaling")
    return EXIT_OK


def _kinds(value: str) -> tuple[str, ...]:
    return ALL_KINDS if value == "all" else (value,)


def cmd_train(args, cfg: dict) -> int:
    seed = resolve_seed(args, cfg)
    data_dir = Path(pick(args, "data", cfg, "data", "data"))
    out = Path(pick(args, "out", cfg, "out", "runs"))
    mcfg = model_config(args, cfg)
    tcfg = train_config(args, cfg, seed)
    try:
        grid, data, _ = _read_data_dir(data_dir)
    except CliExit as exc:
        raise UsageError(str(exc)) from None
    prep = prepare(data, mcfg.seq_len, use_edges=mcfg.edge_mode != "ignore")
    out.mkdir(parents=True, exist_ok=True)
    (out / "norm_stats.json").write_text(prep.stats.to_json(), encoding="utf-8")
    kinds = _kinds(pick(args, "model", cfg, "train.model", "gnn"))
    for kind in kinds:
        if kind == "rolling_mean":
            rm = RollingMeanModel(RollingMeanConfig(min(24, mcfg.seq_len), mcfg.seq_len))
            save_model(out / CKPT_FILES[kind], rm, prep.stats.as_tensors())
            print("rolling_mean: marker written")
            continue
        if kind == "linear":
            # a day of lags, capped by shorter windows
            lin = fit_linear(prep.train.node, min(24, mcfg.seq_len), 1e-6, mcfg.seq_len)
            save_model(out / CKPT_FILES[kind], lin, prep.stats.as_tensors())
            print("linear: fitted")
            continue
        model = (GNNModel(mcfg, grid, seed=seed) if kind == "gnn"
                 else MLPModel(MLPConfig(seq_len=mcfg.seq_len), seed=seed))
        run_dir = out / kind
        resume = run_dir / "last.ckpt" if args.resume else None
        if resume is not None and not resume.exists():
            raise UsageError(f"--resume given but {resume} does not exist")
        try:
            res = train(model, prep.train_windows, prep.val_windows, tcfg, prep.stats, run_dir, resume,
                        progress=lambda e, a, b, k=kind: print(f"{k}: epoch {e} train {a:.6g} val {b:.6g}"))
        except TrainingDivergence as exc:
            raise CliExit(EXIT_TRAIN, f"{kind}: {exc}; last good checkpoint kept in {run_dir}") from exc
        if not (run_dir / "best.ckpt").exists():
            save_model(run_dir / "best.ckpt", res.best_model, prep.stats.as_tensors())
        print(f"{kind}: best epoch {res.best_epoch}")
    return EXIT_OK


def _load_eval_models(models_dir: Path, grid, stats: NormStats):
    missing = []
    for kind in ALL_KINDS:
        if not (models_dir / CKPT_FILES[kind]).exists():
            missing.append(f"{ckpt_io.MAGICS[kind].decode()} ({models_dir / CKPT_FILES[kind]})")
    if not (models_dir / "norm_stats.json").exists():
        missing.append(f"normalisation stats ({models_dir / 'norm_stats.json'})")
    if missing:
        raise CliExit(EXIT_EVAL, "missing artifacts: " + "; ".join(missing))
    models = {}
    for kind in ALL_KINDS:
        ck = ckpt_io.load(models_dir / CKPT_FILES[kind], ckpt_io.MAGICS[kind])
        _check_stats(ck, stats, models_dir / CKPT_FILES[kind])
        from gridcast.models_io import model_from_checkpoint
        models[REPORT_NAMES[kind]] = model_from_checkpoint(ck, grid)
    return models


def _check_stats(ck, stats: NormStats, path) -> None:
    if "norm.mu_v" not in ck.state:
        return
    if NormStats.from_tensors(ck.state).digest() != stats.digest():
        raise CliExit(EXIT_EVAL, f"{path} was trained with different normalisation statistics")


def _predictions_csv(preds: dict[str, np.ndarray], targets: np.ndarray, first_t: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "t", "bus", *(PRED_UNITS[f] for f in NODE_FEATURES)])
    for name, arr in [("TARGET", targets), *preds.items()]:
        for k in range(arr.shape[0]):
            for b in range(arr.shape[1]):
                w.writerow([name, first_t + k, b, *map(repr, map(float, arr[k, b]))])
    return buf.getvalue()


def cmd_evaluate(args, cfg: dict) -> int:
    data_dir = Path(pick(args, "data", cfg, "data", "data"))
    models_dir = Path(pick(args, "models", cfg, "models", "runs"))
    out = Path(pick(args, "out", cfg, "report_dir", "report"))
    grid, data, profiles = _read_data_dir(data_dir)
    if not (models_dir / "norm_stats.json").exists():
        raise CliExit(EXIT_EVAL, f"missing artifacts: normalisation stats ({models_dir / 'norm_stats.json'})")
    stats = NormStats.from_json((models_dir / "norm_stats.json").read_text(encoding="utf-8"))
    gnn_ck = models_dir / CKPT_FILES["gnn"]
    seq_len = ckpt_io.load(gnn_ck).header[4] if gnn_ck.exists() else 48
    prep = prepare(data, seq_len)
    if prep.stats.digest() != stats.digest():
        raise CliExit(EXIT_EVAL, "norm_stats.json does not match the training split of this dataset")
    models = _load_eval_models(models_dir, grid, stats)
    report = build_report(models, prep, grid, profiles, {"data": str(data_dir), "models": str(models_dir)})
    emit_report(report, out, tuple(args.formats.split(",")) if args.formats else ("csv", "json", "svg"))
    y = stats.denormalize_nodes(np.stack([w.target for w in prep.val_windows]))
    preds = {m: y + report.errors[m] for m in report.models}
    first_t = prep.split + prep.val_windows[0].target_index
    (out / "predictions.csv").write_text(_predictions_csv(preds, y, first_t), encoding="utf-8")
    print((out / "table1.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def _read_predictions(path: Path):
    rows: dict[str, list] = {}
    with open(path, newline="", encoding="utf-8") as f:
        for r in csv.DictReader(row for row in f if not row.startswith("#")):
            rows.setdefault(r["model"], []).append(r)
    arrays, first_t = {}, None
    for name, rs in rows.items():
        t = np.array([int(r["t"]) for r in rs])
        b = np.array([int(r["bus"]) for r in rs])
        vals = np.array([[float(r[PRED_UNITS[f]]) for f in NODE_FEATURES] for r in rs])
        arr = np.empty((t.max() - t.min() + 1, b.max() + 1, len(NODE_FEATURES)))
        arr[t - t.min(), b] = vals
        arrays[name] = arr
        first_t = int(t.min())
    return arrays, first_t


def cmd_report(args, cfg: dict) -> int:
    src = Path(pick(args, "predictions", cfg, "predictions", "report/predictions.csv"))
    data_dir = Path(pick(args, "data", cfg, "data", "data"))
    models_dir = Path(pick(args, "models", cfg, "models", "runs"))
    out = Path(pick(args, "out", cfg, "report_dir", "report"))
    if not src.exists():
        raise CliExit(EXIT_EVAL, f"missing artifacts: predictions file {src} (run evaluate first)")
    grid, data, profiles = _read_data_dir(data_dir)
    stats = NormStats.from_json((models_dir / "norm_stats.json").read_text(encoding="utf-8"))
    arrays, _ = _read_predictions(src)
    targets = arrays.pop("TARGET")
    gnn_ck = models_dir / CKPT_FILES["gnn"]
    prep = prepare(data, ckpt_io.load(gnn_ck).header[4] if gnn_ck.exists() else 48)
    from gridcast.grid import node_degrees
    report = from_predictions(arrays, targets, node_degrees(grid), stats.sigma_v + stats.eps,
                              validation_strata(profiles, prep), {"data": str(data_dir), "models": str(models_dir)})
    emit_report(report, out, tuple(args.formats.split(",")) if args.formats else ("csv", "json", "svg"))
    print((out / "table1.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_predict(args, cfg: dict) -> int:
    ckpt_path = Path(args.checkpoint)
    stats_path = Path(args.stats) if args.stats else ckpt_path.parent.parent / "norm_stats.json"
    for p in (ckpt_path, stats_path):
        if not p.exists():
            raise UsageError(f"file not found: {p}")
    stats = NormStats.from_json(stats_path.read_text(encoding="utf-8"))
    ck = ckpt_io.load(ckpt_path)
    if "norm.mu_v" in ck.state and NormStats.from_tensors(ck.state).digest() != stats.digest():
        raise UsageError(f"{stats_path} does not match the statistics stored in {ckpt_path}")
    grid = None
    if ck.kind == "gnn":
        if args.grid is None:
            raise UsageError("--grid DIR is required for a GNN checkpoint")
        grid = read_grid_dir(Path(args.grid))
    from gridcast.models_io import model_from_checkpoint
    model = model_from_checkpoint(ck, grid)
    seq_len = ck.header[4]
    window = Dataset.load(Path(args.window)) if Path(args.window).is_dir() else _window_from_csv(Path(args.window))
    node = window.node
    if args.start is not None:
        node = node[args.start:args.start + seq_len]
    if node.shape[0] != seq_len:
        raise UsageError(f"window must contain exactly {seq_len} snapshots, got {node.shape[0]}")
    pred = stats.denormalize_nodes(model.predict(stats.normalize_nodes(node)))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bus", *(PRED_UNITS[f] for f in NODE_FEATURES)])
    for b, row in enumerate(pred):
        w.writerow([b, *map(repr, map(float, row))])
    if args.out:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def _window_from_csv(path: Path) -> Dataset:
    from gridcast.dataset import _read_table
    node = _read_table(path, ["t", "bus", *NODE_FEATURES])
    return Dataset(node, np.zeros((node.shape[0], 0, 5)))


# --- parser -------------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gridcast", description="Next-step power-system state forecasting on a synthetic "
                "118-bus grid: data generation, GNN and baseline training, evaluation.")
    p.add_argument("--config", metavar="FILE", help="JSON config file; command-line flags override it")
    p.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    g = sub.add_parser("generate", help="synthesise profiles and solve hourly AC power flows")
    g.add_argument("--grid", help="'nrel118' (built-in) or a directory with bus.csv, branch.csv, gen.csv")
    g.add_argument("--grid-seed", type=int, help="seed of the built-in grid's generator mix (default: --seed)")
    g.add_argument("--hours", type=int, help="horizon in hourly snapshots (default: 2160)")
    g.add_argument("--seed", type=int, help="RNG seed (fallback: $GRIDCAST_SEED, then 0)")
    g.add_argument("--seq-len", type=int, help="window length in hours; --hours must exceed it (default: 48)")
    g.add_argument("--out", help="output directory (default: data)")

    t = sub.add_parser("train", help="train GNN / MLP, fit the AR baseline, write checkpoints")
    t.add_argument("--data", help="dataset directory written by generate (default: data)")
    t.add_argument("--model", choices=("gnn", "mlp", "linear", "rolling_mean", "all"),
                   help="which model(s) to train (default: gnn)")
    t.add_argument("--epochs", type=int, help="passes over the training windows (default: 100)")
    t.add_argument("--lr", type=float, help="Adam learning rate (default: 1e-4)")
    t.add_argument("--weight-decay", type=float, help="L2 weight decay added to gradients (default: 1e-5)")
    t.add_argument("--clip-norm", type=float, help="global gradient-norm clip (default: 0.5)")
    t.add_argument("--patience", type=int, help="early-stop after this many epochs without "
                   "validation improvement (default: off)")
    t.add_argument("--hidden", type=int, help="GNN hidden width (default: 32)")
    t.add_argument("--dropout", type=float, help="dropout rate after each SAGE layer (default: 0.1)")
    t.add_argument("--seq-len", type=int, help="window length in hours (default: 48)")
    t.add_argument("--edge-mode", choices=("ignore", "mean_inject"), help="use of branch features (default: ignore)")
    t.add_argument("--seed", type=int, help="RNG seed for init, shuffling, dropout (fallback: $GRIDCAST_SEED, then 0)")
    t.add_argument("--resume", action="store_true", help="continue from <out>/<model>/last.ckpt")
    t.add_argument("--out", help="run directory for checkpoints, loss curves, stats (default: runs)")

    e = sub.add_parser("evaluate", help="score all four models on the validation windows")
    e.add_argument("--data", help="dataset directory (default: data)")
    e.add_argument("--models", help="run directory written by train --model all (default: runs)")
    e.add_argument("--formats", help="comma list of csv,json,svg (default: all)")
    e.add_argument("--out", help="report directory (default: report)")

    r = sub.add_parser("predict", help="next-step state from one window")
    r.add_argument("--checkpoint", required=True, help="model checkpoint file")
    r.add_argument("--stats", help="norm_stats.json (default: next to the run directory)")
    r.add_argument("--window", required=True, help="bus-state CSV (t,bus,v_mag,v_ang_deg,p_mw,q_mvar) "
                   "or a dataset directory")
    r.add_argument("--start", type=int, help="first snapshot of the window within --window (default: use all)")
    r.add_argument("--grid", help="grid directory (needed for GNN checkpoints)")
    r.add_argument("--out", help="output CSV (default: stdout); columns in p.u., degrees, MW, MVAr")

    q = sub.add_parser("report", help="re-render report files from a saved predictions.csv")
    q.add_argument("--predictions", help="predictions.csv written by evaluate (default: report/predictions.csv)")
    q.add_argument("--data", help="dataset directory (default: data)")
    q.add_argument("--models", help="run directory holding norm_stats.json (default: runs)")
    q.add_argument("--formats", help="comma list of csv,json,svg (default: all)")
    q.add_argument("--out", help="report directory (default: report)")
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
            "predict": cmd_predict, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    command = None
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        command = args.command
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CliExit as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (GridError, CheckpointError, ReportError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EVAL if command in ("evaluate", "report") else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
