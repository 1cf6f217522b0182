"""Accuracy and robustness statistics plus report files.

Errors are ``prediction - target`` in physical units, shaped
``(timesteps, buses, features)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gridcast.dataset import NODE_FEATURES

MODEL_ORDER = ("GNN", "NN", "LR", "RM")
FEATURE_LABELS = ("V (p.u.)", "theta (deg)", "P (MW)", "Q (MVAr)")
HIST_MAX = 1.5
HIST_WIDTH = 0.05
P_IDX, THETA_IDX = 2, 1


class ReportError(ValueError):
    pass


# --- elementary statistics -----------------------------------------------------------------

def rmse_grid(preds, targets) -> np.ndarray:
    """Per-bus, per-feature RMSE over the time axis: (T, N, F) -> (N, F)."""
    p, y = np.asarray(preds, dtype=float), np.asarray(targets, dtype=float)
    if p.shape != y.shape:
        raise ValueError(f"prediction shape {p.shape} != target shape {y.shape}")
    if p.ndim != 3 or p.shape[0] == 0:
        raise ValueError("need a non-empty (T, N, F) series")
    d = p - y
    return np.sqrt(np.mean(d * d, axis=0))


def pearson(x, y) -> float | None:
    """Pearson r, or None when either input has zero variance."""
    x, y = np.asarray(x, dtype=float).ravel(), np.asarray(y, dtype=float).ravel()
    if x.size != y.size or x.size < 2:
        return None
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx <= 0.0 or syy <= 0.0:
        return None
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def coefficient_of_variation(values) -> float | None:
    """Population std / mean; None when the mean is zero."""
    v = np.asarray(values, dtype=float)
    m = float(v.mean())
    if m == 0.0:
        return None
    return float(v.std()) / m


def lag1_autocorr(series) -> float | None:
    s = np.asarray(series, dtype=float)
    if s.size < 3:
        return None
    return pearson(s[:-1], s[1:])


def percentile(values, q: float) -> float:
    """Linear interpolation between order statistics (numpy's default method)."""
    return float(np.percentile(np.asarray(values, dtype=float), q))


# --- aggregate table ----------------------------------------------------------------------

@dataclass(frozen=True)
class AggregateTable:
    models: tuple[str, ...]
    mean: np.ndarray  # (models, F)
    std: np.ndarray  # population std over buses

    def row(self, model: str) -> tuple[np.ndarray, np.ndarray]:
        i = self.models.index(model)
        return self.mean[i], self.std[i]

    def to_csv(self) -> str:
        lines = ["# mean +/- population std of per-bus RMSE over the validation windows, physical units",
                 "model," + ",".join(f"{f}_mean,{f}_std" for f in NODE_FEATURES)]
        for i, m in enumerate(self.models):
            cells = [f"{self.mean[i, f]:.6f},{self.std[i, f]:.6f}" for f in range(self.mean.shape[1])]
            lines.append(m + "," + ",".join(cells))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        cells = [[f"{self.mean[i, f]:.4f} ± {self.std[i, f]:.4f}" for f in range(self.mean.shape[1])]
                 for i in range(len(self.models))]
        head = ["Model", *FEATURE_LABELS]
        widths = [max(len(head[0]), *(len(m) for m in self.models))]
        widths += [max(len(head[f + 1]), *(len(r[f]) for r in cells)) for f in range(len(FEATURE_LABELS))]
        fmt = lambda row: "  ".join(c.ljust(w) if j == 0 else c.rjust(w) for j, (c, w) in enumerate(zip(row, widths)))
        rule = "-" * len(fmt(head))
        out = ["Average RMSE by model and feature (mean ± std over buses)", rule, fmt(head), rule]
        out += [fmt([m, *cells[i]]) for i, m in enumerate(self.models)]
        out.append(rule)
        return "\n".join(out) + "\n"


def aggregate_table(grids: dict[str, np.ndarray], models=MODEL_ORDER) -> AggregateTable:
    missing = [m for m in models if m not in grids]
    if missing:
        raise ReportError(f"model set incomplete, missing: {', '.join(missing)}")
    shapes = {grids[m].shape for m in models}
    if len(shapes) != 1:
        raise ReportError(f"RMSE grids differ in shape: {sorted(shapes)}")
    mean = np.stack([grids[m].mean(axis=0) for m in models])
    std = np.stack([grids[m].std(axis=0) for m in models])
    return AggregateTable(tuple(models), mean, std)


# --- robustness -------------------------------------------------------------------------------

@dataclass
class RobustnessStats:
    cv: list  # per feature, float or None
    p95_abs_err: list
    rho1: list
    degree_corr: list
    cross_var_corr: float | None

    def as_dict(self) -> dict:
        return {"cv": self.cv, "p95_abs_err": self.p95_abs_err, "rho1": self.rho1,
                "degree_corr": self.degree_corr, "cross_var_corr": self.cross_var_corr}


def robustness_stats(errors, degrees, rmse: np.ndarray | None = None) -> RobustnessStats:
    """CV of per-bus RMSE, 95th percentile |error|, lag-1 autocorrelation of the
    bus-mean error series, degree/RMSE correlation and the P/theta error correlation."""
    e = np.asarray(errors, dtype=float)
    deg = np.asarray(degrees, dtype=float)
    if e.ndim != 3:
        raise ValueError("errors must be shaped (T, N, F)")
    T, N, F = e.shape
    if T < 3 or N < 3:
        raise ValueError("robustness statistics need at least 3 timesteps and 3 buses")
    if deg.shape != (N,):
        raise ValueError(f"degree vector has shape {deg.shape}, expected ({N},)")
    r = np.sqrt(np.mean(e * e, axis=0)) if rmse is None else np.asarray(rmse, dtype=float)
    sys_mean = e.mean(axis=1)  # (T, F)
    cross = pearson(e[..., P_IDX], e[..., THETA_IDX]) if F > max(P_IDX, THETA_IDX) else None
    return RobustnessStats(
        cv=[coefficient_of_variation(r[:, f]) for f in range(F)],
        p95_abs_err=[percentile(np.abs(e[..., f]), 95.0) for f in range(F)],
        rho1=[lag1_autocorr(sys_mean[:, f]) for f in range(F)],
        degree_corr=[pearson(deg, r[:, f]) for f in range(F)],
        cross_var_corr=cross,
    )


def stratified_rmse(errors, mask) -> list | None:
    """Bus-averaged RMSE per feature over the timesteps selected by ``mask``."""
    e = np.asarray(errors, dtype=float)
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return None
    return [float(v) for v in np.sqrt(np.mean(e[m] ** 2, axis=0)).mean(axis=0)]


def strata_masks(total_load, renewable_share) -> dict[str, np.ndarray]:
    """Top-quintile system load, and renewable share above 50 %."""
    load = np.asarray(total_load, dtype=float)
    share = np.asarray(renewable_share, dtype=float)
    return {"high_load": load >= np.percentile(load, 80.0), "high_renewable": share > 0.5}


# --- report --------------------------------------------------------------------------------------

@dataclass
class EvalReport:
    errors: dict[str, np.ndarray]  # model -> (T, N, F) prediction - target, physical units
    degrees: np.ndarray  # (N,)
    scale: np.ndarray  # (F,) sigma + eps, used to express errors in normalised units
    strata: dict[str, np.ndarray] = field(default_factory=dict)  # name -> (T,) bool
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()
        self.rmse = {m: np.sqrt(np.mean(e * e, axis=0)) for m, e in self.errors.items()}

    @property
    def models(self) -> tuple[str, ...]:
        return tuple(m for m in MODEL_ORDER if m in self.errors) + tuple(
            sorted(m for m in self.errors if m not in MODEL_ORDER))

    def validate(self) -> None:
        if not self.errors:
            raise ReportError("report has no models")
        shapes = {np.shape(e) for e in self.errors.values()}
        if len(shapes) != 1:
            raise ReportError(f"models were evaluated on different windows: {sorted(shapes)}")
        (shape,) = shapes
        if len(shape) != 3 or shape[0] == 0:
            raise ReportError("error series must be non-empty (T, N, F) arrays")
        if np.shape(self.degrees) != (shape[1],):
            raise ReportError("degree vector does not match the bus count")
        if np.shape(self.scale) != (shape[2],):
            raise ReportError("feature scale does not match the feature count")
        for name, mask in self.strata.items():
            if np.shape(mask) != (shape[0],):
                raise ReportError(f"stratum {name!r} mask has the wrong length")

    def aggregate(self) -> AggregateTable:
        return aggregate_table(self.rmse, self.models)

    def robustness(self) -> dict[str, RobustnessStats]:
        return {m: robustness_stats(self.errors[m], self.degrees, self.rmse[m]) for m in self.models}


def from_predictions(preds: dict[str, np.ndarray], targets: np.ndarray, degrees, scale, strata=None,
                     meta=None) -> EvalReport:
    y = np.asarray(targets, dtype=float)
    errors = {}
    for m, p in preds.items():
        p = np.asarray(p, dtype=float)
        if p.shape != y.shape:
            raise ReportError(f"{m}: prediction shape {p.shape} != target shape {y.shape}")
        errors[m] = p - y
    return EvalReport(errors, np.asarray(degrees, dtype=float), np.asarray(scale, dtype=float),
                      dict(strata or {}), dict(meta or {}))


def _f(x) -> str:
    return "NA" if x is None else f"{x:.9g}"


def rmse_by_bus_csv(report: EvalReport) -> str:
    lines = ["# per-bus RMSE in physical units (heat-map data); degree = undirected branch count",
             "model,bus,degree," + ",".join(NODE_FEATURES)]
    for m in report.models:
        for b, row in enumerate(report.rmse[m]):
            lines.append(f"{m},{b},{int(report.degrees[b])}," + ",".join(_f(v) for v in row))
    return "\n".join(lines) + "\n"


def error_hist_csv(report: EvalReport) -> str:
    edges = np.round(np.arange(0.0, HIST_MAX + HIST_WIDTH / 2, HIST_WIDTH), 10)
    lines = [f"# density of |error| / (sigma + eps) per feature; bins of width {HIST_WIDTH} on [0, {HIST_MAX}],"
             f" values above {HIST_MAX} clipped into the last bin",
             "model,feature,bin_lo,bin_hi,count,density"]
    for m in report.models:
        e = np.abs(report.errors[m]) / report.scale
        for f, name in enumerate(NODE_FEATURES):
            vals = np.minimum(e[..., f].ravel(), HIST_MAX)
            counts, _ = np.histogram(vals, bins=edges)
            dens = counts / (vals.size * HIST_WIDTH)
            for k in range(len(counts)):
                lines.append(f"{m},{name},{edges[k]:.2f},{edges[k + 1]:.2f},{counts[k]},{dens[k]:.9g}")
    return "\n".join(lines) + "\n"


def box_summary(values) -> list[float]:
    v = np.asarray(values, dtype=float)
    return [float(v.min()), *(percentile(v, q) for q in (25.0, 50.0, 75.0)), float(v.max()), float(v.mean())]


def boxplot_csv(report: EvalReport) -> str:
    lines = ["# distribution of per-bus RMSE (physical units); quartiles by linear interpolation",
             "model,feature,min,q1,median,q3,max,mean"]
    for m in report.models:
        for f, name in enumerate(NODE_FEATURES):
            lines.append(f"{m},{name}," + ",".join(_f(v) for v in box_summary(report.rmse[m][:, f])))
    return "\n".join(lines) + "\n"


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def report_json(report: EvalReport) -> str:
    table = report.aggregate()
    body = {
        "features": list(NODE_FEATURES),
        "models": list(report.models),
        "n_windows": int(next(iter(report.errors.values())).shape[0]),
        "n_buses": int(report.degrees.size),
        "aggregate": {m: {"mean": table.row(m)[0], "std": table.row(m)[1]} for m in report.models},
        "robustness": {m: s.as_dict() for m, s in report.robustness().items()},
        "strata": {name: {"n_windows": int(np.sum(mask)),
                          "rmse": {m: stratified_rmse(report.errors[m], mask) for m in report.models}}
                   for name, mask in sorted(report.strata.items())},
        "meta": report.meta,
    }
    return json.dumps(_clean(body), indent=2, sort_keys=False) + "\n"


_COLORS = ("#1b6ca8", "#e07b39", "#4c9a2a", "#8e6bb0", "#777777")


def bar_svg(table: AggregateTable) -> str:
    """Grouped bar chart (one panel per feature) with +/- std whiskers."""
    pw, ph, pad = 180, 160, 30
    W = pad + len(FEATURE_LABELS) * (pw + pad)
    H = ph + 3 * pad + 20
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
           'font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>']
    nm = len(table.models)
    for f, label in enumerate(FEATURE_LABELS):
        x0 = pad + f * (pw + pad)
        y0 = pad
        top = float(np.max(table.mean[:, f] + table.std[:, f]))
        top = top if top > 0 else 1.0
        out.append(f'<text x="{x0 + pw / 2:.1f}" y="{y0 - 10}" text-anchor="middle">{label}</text>')
        out.append(f'<line x1="{x0}" y1="{y0 + ph}" x2="{x0 + pw}" y2="{y0 + ph}" stroke="black"/>')
        bw = pw / (nm + 1)
        for i, m in enumerate(table.models):
            hgt = ph * table.mean[i, f] / top
            bx = x0 + bw * (i + 0.5)
            out.append(f'<rect x="{bx:.2f}" y="{y0 + ph - hgt:.2f}" width="{bw * 0.8:.2f}" height="{hgt:.2f}" '
                       f'fill="{_COLORS[i % len(_COLORS)]}"><title>{m}: {table.mean[i, f]:.4g}</title></rect>')
            lo = ph * max(table.mean[i, f] - table.std[i, f], 0.0) / top
            hi = ph * (table.mean[i, f] + table.std[i, f]) / top
            cx = bx + bw * 0.4
            out.append(f'<line x1="{cx:.2f}" y1="{y0 + ph - lo:.2f}" x2="{cx:.2f}" y2="{y0 + ph - hi:.2f}" '
                       'stroke="black"/>')
            out.append(f'<text x="{cx:.2f}" y="{y0 + ph + 14}" text-anchor="middle">{m}</text>')
    out.append(f'<text x="{pad}" y="{H - 8}">bars: mean per-bus RMSE; whiskers: +/- std over buses</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_report(report: EvalReport, formats=("csv", "json", "svg")) -> dict[str, str]:
    """All report files as {name: text}; raises before anything is written."""
    formats = set(formats)
    unknown = formats - {"csv", "json", "svg"}
    if unknown:
        raise ReportError(f"unknown report format(s): {', '.join(sorted(unknown))}")
    report.validate()
    table = report.aggregate()
    files = {"table1.txt": table.to_text()}
    if "csv" in formats:
        files.update({"table1.csv": table.to_csv(), "rmse_by_bus.csv": rmse_by_bus_csv(report),
                      "error_hist.csv": error_hist_csv(report), "boxplot.csv": boxplot_csv(report)})
    if "json" in formats:
        files["report.json"] = report_json(report)
    if "svg" in formats:
        files["rmse_bars.svg"] = bar_svg(table)
    return files


def emit_report(report: EvalReport, out_dir, formats=("csv", "json", "svg")) -> list[Path]:
    files = render_report(report, formats)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create report directory {out}: {exc}") from exc
    written = []
    for name in sorted(files):
        path = out / name
        path.write_bytes(files[name].encode("utf-8"))
        written.append(path)
    return written
