import contextlib
import io
import json

import numpy as np
import pytest

from gridcast import checkpoint as ckpt_io
from gridcast.cli import build_parser, main
from gridcast.dataset import Dataset
from gridcast.grid import read_grid_dir
from gridcast.models_io import load_model
from gridcast.pipeline import prepare, predict_windows
from gridcast.training import NormStats, evaluate_loss

from test_evaluation import golden

SEQ = 12


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, runs, rep = root / "data", root / "runs", root / "report"
    code, out, _ = run("generate", "--grid", "nrel118", "--hours", 72, "--seed", 7, "--seq-len", SEQ, "--out", data)
    assert code == 0, out
    code, out, err = run("train", "--data", data, "--model", "all", "--epochs", 2, "--seq-len", SEQ,
                         "--seed", 7, "--out", runs)
    assert code == 0, err
    code, out, err = run("evaluate", "--data", data, "--models", runs, "--out", rep)
    assert code == 0, err
    return root


@pytest.mark.parametrize("cmd", ["", "generate", "train", "evaluate", "predict", "report"])
def test_help_golden(cmd, monkeypatch):
    monkeypatch.setenv("COLUMNS", "100")
    parser = build_parser()
    if cmd:
        sub = next(a for a in parser._actions if a.dest == "command").choices[cmd]
        text = sub.format_help()
    else:
        text = parser.format_help()
    golden(f"help_{cmd or 'main'}.txt", text)


def test_help_mentions_units():
    text = build_parser().format_help()
    sub = next(a for a in build_parser()._actions if a.dest == "command").choices
    assert "hourly" in sub["generate"].format_help()
    assert "MW" in sub["predict"].format_help()
    assert "generate" in text and "report" in text


def test_generate_writes_72_snapshots(pipeline):
    data = Dataset.load(pipeline / "data")
    assert len(data) == 72 and data.node.shape[1] == 118
    assert read_grid_dir(pipeline / "data" / "grid").n_bus == 118
    meta = json.loads((pipeline / "data" / "generate.json").read_text())
    assert meta["hours"] == 72 and meta["seed"] == 7


def test_generate_is_byte_identical(pipeline, tmp_path):
    assert run("generate", "--hours", 72, "--seed", 7, "--seq-len", SEQ, "--out", tmp_path)[0] == 0
    for name in ("bus_states.csv", "branch_states.csv", "profiles.csv", "generate.json", "grid/bus.csv"):
        assert (tmp_path / name).read_bytes() == (pipeline / "data" / name).read_bytes()


def test_generate_rejects_short_horizon(tmp_path):
    code, _, err = run("generate", "--hours", 10, "--out", tmp_path / "d")
    assert code == 1 and "--hours" in err
    assert not (tmp_path / "d").exists()


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("GRIDCAST_SEED", "7")
    assert run("generate", "--hours", 60, "--seq-len", SEQ, "--out", tmp_path / "a")[0] == 0
    assert json.loads((tmp_path / "a" / "generate.json").read_text())["seed"] == 7
    monkeypatch.setenv("GRIDCAST_SEED", "x")
    assert run("generate", "--hours", 60, "--seq-len", SEQ, "--out", tmp_path / "b")[0] == 1


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"seed": 3, "horizon_hours": 61, "model": {"seq_len": SEQ}}))
    assert run("--config", cfg, "generate", "--out", tmp_path / "a")[0] == 0
    assert json.loads((tmp_path / "a" / "generate.json").read_text())["hours"] == 61
    assert run("--config", cfg, "generate", "--hours", 62, "--out", tmp_path / "b")[0] == 0
    meta = json.loads((tmp_path / "b" / "generate.json").read_text())
    assert meta["hours"] == 62 and meta["seed"] == 3


def test_train_all_artifacts(pipeline):
    runs = pipeline / "runs"
    for rel, magic in (("gnn/best.ckpt", b"GNNCKPT1"), ("mlp/best.ckpt", b"MLPBASE1"),
                       ("linear/model.ckpt", b"LINREG01"), ("rolling_mean/model.ckpt", b"RMEAN001")):
        assert (runs / rel).read_bytes()[:8] == magic
    assert (runs / "gnn" / "loss.csv").read_text().startswith("epoch,train_mse,val_mse\n")
    stats = NormStats.from_json((runs / "norm_stats.json").read_text())
    data = Dataset.load(pipeline / "data")
    assert stats.digest() == prepare(data, SEQ).stats.digest()


def test_evaluate_table(pipeline):
    lines = (pipeline / "report" / "table1.csv").read_text().splitlines()
    rows = [ln for ln in lines if not ln.startswith("#")]
    assert rows[0].count(",") == 8
    assert [r.split(",")[0] for r in rows[1:]] == ["GNN", "NN", "LR", "RM"]


def test_evaluate_is_byte_identical(pipeline, tmp_path):
    assert run("evaluate", "--data", pipeline / "data", "--models", pipeline / "runs", "--out", tmp_path)[0] == 0
    for p in (pipeline / "report").iterdir():
        assert (tmp_path / p.name).read_bytes() == p.read_bytes(), p.name


def test_report_rerenders_same_files(pipeline, tmp_path):
    code, _, err = run("report", "--predictions", pipeline / "report" / "predictions.csv",
                       "--data", pipeline / "data", "--models", pipeline / "runs", "--out", tmp_path)
    assert code == 0, err
    for name in ("table1.csv", "rmse_by_bus.csv", "boxplot.csv", "error_hist.csv"):
        assert (tmp_path / name).read_bytes() == (pipeline / "report" / name).read_bytes()


def test_missing_mlp_checkpoint(pipeline, tmp_path):
    import shutil
    runs = tmp_path / "runs"
    shutil.copytree(pipeline / "runs", runs)
    (runs / "mlp" / "best.ckpt").unlink()
    code, _, err = run("evaluate", "--data", pipeline / "data", "--models", runs, "--out", tmp_path / "r")
    assert code == 4 and "MLPBASE1" in err
    assert not (tmp_path / "r").exists()


def test_checkpoint_reload_reproduces_validation_mse(pipeline):
    grid = read_grid_dir(pipeline / "data" / "grid")
    prep = prepare(Dataset.load(pipeline / "data"), SEQ)
    m = load_model(pipeline / "runs" / "gnn" / "best.ckpt", grid)
    best_val = min(float(r.split(",")[2]) for r in (pipeline / "runs" / "gnn" / "loss.csv").read_text().splitlines()[1:])
    assert abs(evaluate_loss(m, prep.val_windows) - best_val) <= 1e-12


def test_predict_matches_evaluate_path(pipeline, tmp_path):
    data = Dataset.load(pipeline / "data")
    grid = read_grid_dir(pipeline / "data" / "grid")
    prep = prepare(data, SEQ)
    start = 5
    out = tmp_path / "pred.csv"
    code, _, err = run("predict", "--checkpoint", pipeline / "runs" / "gnn" / "best.ckpt", "--window",
                       pipeline / "data", "--start", start, "--grid", pipeline / "data" / "grid", "--out", out)
    assert code == 0, err
    header, *rows = out.read_text().splitlines()
    assert header == "bus,v_mag_pu,v_ang_deg,p_mw,q_mvar"
    got = np.array([[float(v) for v in r.split(",")[1:]] for r in rows])
    m = load_model(pipeline / "runs" / "gnn" / "best.ckpt", grid)
    ref = prep.stats.denormalize_nodes(predict_windows(m, [prep.train_windows[start]])[0])
    assert got.tobytes() == ref.tobytes()


def test_predict_truncated_window(pipeline):
    code, _, err = run("predict", "--checkpoint", pipeline / "runs" / "mlp" / "best.ckpt", "--window",
                       pipeline / "data", "--start", 65)
    assert code == 1 and "exactly" in err


def test_predict_stats_mismatch(pipeline, tmp_path):
    stats = NormStats.from_json((pipeline / "runs" / "norm_stats.json").read_text())
    other = NormStats(stats.mu_v + 1, stats.sigma_v, stats.mu_e, stats.sigma_e)
    (tmp_path / "s.json").write_text(other.to_json())
    code, _, err = run("predict", "--checkpoint", pipeline / "runs" / "mlp" / "best.ckpt", "--stats",
                       tmp_path / "s.json", "--window", pipeline / "data", "--start", 0)
    assert code == 1 and "match" in err


def test_flat_regime_memorised(pipeline, tmp_path):
    rng = np.random.default_rng(0)
    flat = np.zeros((72, 118, 4))
    flat[..., 0] = 1.0
    jitter = np.array([1e-4, 1e-3, 1e-2, 1e-2])
    node = flat + rng.standard_normal(flat.shape) * jitter
    edge = rng.standard_normal((72, 179, 5)) * 1e-3
    d = tmp_path / "flat"
    Dataset(node, edge).save(d)
    import shutil
    shutil.copytree(pipeline / "data" / "grid", d / "grid")
    assert run("train", "--data", d, "--model", "gnn", "--epochs", 2, "--seq-len", SEQ, "--out", tmp_path / "r")[0] == 0
    out = tmp_path / "p.csv"
    code, _, err = run("predict", "--checkpoint", tmp_path / "r" / "gnn" / "best.ckpt", "--window", d,
                       "--start", 60, "--grid", d / "grid", "--out", out)
    assert code == 0, err
    pred = np.array([[float(v) for v in r.split(",")[1:]] for r in out.read_text().splitlines()[1:]])
    sigma = node[:57].reshape(-1, 4).std(axis=0)
    assert np.all(np.abs(pred - flat[0]) <= 3 * sigma)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(pipeline, tmp_path):
    code, _, err = run("train", "--data", pipeline / "data", "--model", "mlp", "--epochs", 1, "--lr", 1e300,
                       "--clip-norm", 1e300, "--seq-len", SEQ, "--out", tmp_path)
    assert code == 3, err


def test_usage_errors(tmp_path):
    assert run("train", "--model", "transformer")[0] == 1
    assert run()[0] == 1
    assert run("evaluate", "--data", tmp_path / "none", "--models", tmp_path, "--out", tmp_path / "r")[0] == 4


def test_train_resume_flag(pipeline, tmp_path):
    base = ("train", "--data", pipeline / "data", "--model", "mlp", "--seq-len", SEQ, "--seed", 1)
    assert run(*base, "--epochs", 3, "--out", tmp_path / "full")[0] == 0
    assert run(*base, "--epochs", 1, "--out", tmp_path / "part")[0] == 0
    assert run(*base, "--epochs", 3, "--resume", "--out", tmp_path / "part")[0] == 0
    full = [ln.split(",") for ln in (tmp_path / "full" / "mlp" / "loss.csv").read_text().splitlines()[1:]]
    part = [ln.split(",") for ln in (tmp_path / "part" / "mlp" / "loss.csv").read_text().splitlines()[1:]]
    assert len(full) == len(part) == 3
    for a, b in zip(full, part):
        assert abs(float(a[1]) - float(b[1])) <= 1e-9 and abs(float(a[2]) - float(b[2])) <= 1e-9
