"""Hourly state trajectories from profiles + AC power flow."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gridcast.grid import GridGraph
from gridcast.powerflow import InjectionSet, PowerFlowError, build_ybus, solve_ac_power_flow
from gridcast.profiles import ProfileSeries

log = logging.getLogger(__name__)

NODE_FEATURES = ("v_mag", "v_ang_deg", "p_mw", "q_mvar")
EDGE_FEATURES = ("p_from", "q_from", "p_to", "q_to", "loading_pct")
RETRY_SCALE = 0.95
MAX_RETRIES = 3


class DatasetGenerationError(RuntimeError):
    def __init__(self, failures: dict[int, str]):
        self.failures = failures
        lines = ", ".join(f"t={t}: {msg}" for t, msg in sorted(failures.items()))
        super().__init__(f"{len(failures)} unrecoverable timestep(s): {lines}")


@dataclass(frozen=True)
class Snapshot:
    t: int
    node: np.ndarray  # (n_bus, 4)
    edge: np.ndarray  # (n_branch, 5)
    flagged: bool = False


@dataclass
class Dataset:
    """Chronologically ordered snapshots stored as stacked arrays."""

    node: np.ndarray  # (T, n_bus, 4)
    edge: np.ndarray  # (T, n_branch, 5)
    flags: np.ndarray = None  # (T,) number of 0.95 rescalings needed (0 = clean)

    def __post_init__(self):
        if self.flags is None:
            self.flags = np.zeros(len(self.node), dtype=np.int64)

    def __len__(self) -> int:
        return self.node.shape[0]

    def __getitem__(self, t):
        if isinstance(t, slice):
            return Dataset(self.node[t], self.edge[t], self.flags[t])
        return Snapshot(int(t), self.node[t], self.edge[t], bool(self.flags[t]))

    def __iter__(self):
        return (self[t] for t in range(len(self)))

    @classmethod
    def from_snapshots(cls, snaps) -> "Dataset":
        snaps = list(snaps)
        return cls(np.stack([s.node for s in snaps]), np.stack([s.edge for s in snaps]),
                   np.array([int(s.flagged) for s in snaps], dtype=np.int64))

    # --- CSV bundle ---
    def bus_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "bus", *NODE_FEATURES])
        for t in range(len(self)):
            for b, row in enumerate(self.node[t]):
                w.writerow([t, b, *map(repr, map(float, row))])
        return buf.getvalue()

    def branch_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "branch", *EDGE_FEATURES])
        for t in range(len(self)):
            for b, row in enumerate(self.edge[t]):
                w.writerow([t, b, *map(repr, map(float, row))])
        return buf.getvalue()

    def flags_csv(self) -> str:
        return "t,retries\n" + "".join(f"{t},{int(f)}\n" for t, f in enumerate(self.flags))

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "bus_states.csv").write_text(self.bus_csv(), encoding="utf-8")
        (d / "branch_states.csv").write_text(self.branch_csv(), encoding="utf-8")
        (d / "flags.csv").write_text(self.flags_csv(), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        node = _read_table(d / "bus_states.csv", ["t", "bus", *NODE_FEATURES])
        edge = _read_table(d / "branch_states.csv", ["t", "branch", *EDGE_FEATURES])
        flags = None
        if (d / "flags.csv").exists():
            flags = np.loadtxt(d / "flags.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)[:, 1]
        return cls(node, edge, flags)


def _read_table(path, header) -> np.ndarray:
    with open(path, encoding="utf-8") as f:
        got = f.readline().strip().split(",")
    if got != header:
        raise ValueError(f"{path}: expected header {','.join(header)}, got {','.join(got)}")
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    T = int(raw[:, 0].max()) + 1
    K = int(raw[:, 1].max()) + 1
    out = np.empty((T, K, len(header) - 2))
    out[raw[:, 0].astype(np.int64), raw[:, 1].astype(np.int64)] = raw[:, 2:]
    return out


@dataclass(frozen=True)
class GenerationOptions:
    seed: int = 0
    bus_noise: float = 0.01  # std of per-bus AR(1) multiplicative load noise
    bus_noise_phi: float = 0.7
    min_dispatch_frac: float = 0.1  # renewables curtailed so dispatchables serve >= this share of load
    tol: float = 1e-8
    max_iter: int = 30


@dataclass
class InjectionPlan:
    """Per-timestep injections derived from profiles by the dispatch rule."""

    p_mw: np.ndarray  # (T, n_bus)
    q_mvar: np.ndarray  # (T, n_bus)
    v_setpoint: np.ndarray  # (n_bus,)
    renewable_mw: np.ndarray = field(default=None)  # (T,) after curtailment

    def at(self, t: int) -> InjectionSet:
        return InjectionSet(self.p_mw[t], self.q_mvar[t], self.v_setpoint)


def dispatch(grid: GridGraph, profiles: ProfileSeries, opts: GenerationOptions = GenerationOptions()) -> InjectionPlan:
    """Allocate demand to units.

    Renewables produce their regional capacity factor times ``p_max``;
    dispatchable units share the regional net load in proportion to
    ``p_max`` (capped at ``p_max``). The slack bus absorbs losses and any
    shortfall.
    """
    n, R, T = grid.n_bus, grid.n_region, profiles.horizon
    regions = grid.regions
    rng = np.random.default_rng(opts.seed)

    base_p, base_q = grid.base_load[:, 0], grid.base_load[:, 1]
    region_base = np.zeros(R)
    np.add.at(region_base, regions, base_p)
    scale = np.divide(profiles.load, region_base[:, None], out=np.zeros_like(profiles.load),
                      where=region_base[:, None] > 0)  # (R, T)
    factor = scale[regions].T  # (T, n)
    if opts.bus_noise > 0:
        phi = opts.bus_noise_phi
        z = np.empty((T, n))
        z[0] = rng.standard_normal(n)
        innov = rng.standard_normal((T, n)) * np.sqrt(1 - phi * phi)
        for t in range(1, T):
            z[t] = phi * z[t - 1] + innov[t]
        factor = factor * np.clip(1.0 + opts.bus_noise * z, 0.0, None)
    load_p = factor * base_p
    load_q = factor * base_q
    region_load = np.zeros((T, R))
    for r in range(R):
        region_load[:, r] = load_p[:, regions == r].sum(axis=1)

    gen_p = np.zeros((T, n))
    cf = {}
    for tech, series in (("wind", profiles.wind), ("solar", profiles.solar)):
        cap = np.zeros(R)
        for g in grid.generators:
            if g.technology == tech:
                cap[regions[g.bus]] += g.p_max
        cf[tech] = np.divide(series, cap[:, None], out=np.zeros_like(series), where=cap[:, None] > 0).T  # (T, R)
    renew = np.zeros((T, R))
    for g in grid.generators:
        if g.technology in cf:
            renew[:, regions[g.bus]] += np.minimum(cf[g.technology][:, regions[g.bus]], 1.0) * g.p_max
    allowed = (1.0 - opts.min_dispatch_frac) * region_load
    curtail = np.divide(allowed, renew, out=np.ones_like(renew), where=renew > allowed)
    curtail = np.minimum(curtail, 1.0)
    for g in grid.generators:
        if g.technology in cf:
            r = regions[g.bus]
            gen_p[:, g.bus] += np.minimum(cf[g.technology][:, r], 1.0) * g.p_max * curtail[:, r]
    renew_after = renew * curtail

    net = region_load - renew_after  # (T, R)
    disp_cap = np.zeros(R)
    for g in grid.generators:
        if g.dispatchable and g.bus != grid.slack:
            disp_cap[regions[g.bus]] += g.p_max
    for g in grid.generators:
        if g.dispatchable and g.bus != grid.slack:
            r = regions[g.bus]
            share = g.p_max / disp_cap[r]
            gen_p[:, g.bus] += np.minimum(net[:, r] * share, g.p_max)

    v_set = np.ones(n)
    seen = set()
    for g in grid.generators:
        if g.bus not in seen:
            v_set[g.bus] = g.v_set_pu
            seen.add(g.bus)
    return InjectionPlan(p_mw=gen_p - load_p, q_mvar=-load_q, v_setpoint=v_set,
                         renewable_mw=renew_after.sum(axis=1))


def generate_dataset(grid: GridGraph, profiles: ProfileSeries,
                     opts: GenerationOptions = GenerationOptions(),
                     plan: InjectionPlan | None = None) -> Dataset:
    """Solve one AC power flow per hour.

    Failed solves are retried with all injections scaled by 0.95 (up to
    three times); the retry count is kept in ``Dataset.flags``.
    """
    plan = dispatch(grid, profiles, opts) if plan is None else plan
    T = plan.p_mw.shape[0]
    ybus = build_ybus(grid)
    node = np.empty((T, grid.n_bus, 4))
    edge = np.empty((T, grid.n_branch, 5))
    flags = np.zeros(T, dtype=np.int64)
    failures: dict[int, str] = {}
    for t in range(T):
        inj = plan.at(t)
        for attempt in range(MAX_RETRIES + 1):
            try:
                sol = solve_ac_power_flow(grid, inj, tol=opts.tol, max_iter=opts.max_iter, ybus=ybus)
                break
            except PowerFlowError as exc:
                if attempt == MAX_RETRIES:
                    failures[t] = str(exc)
                    sol = None
                    break
                inj = inj.scaled(RETRY_SCALE)
        if sol is None:
            continue
        flags[t] = attempt
        node[t] = sol.node_features()
        edge[t] = sol.edge_features()
    if failures:
        raise DatasetGenerationError(failures)
    if flags.any():
        log.warning("%d timestep(s) needed injection rescaling", int((flags > 0).sum()))
    return Dataset(node, edge, flags)
