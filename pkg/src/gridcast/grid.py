"""Transmission network topology: buses, branches, generators.

A :class:`GridGraph` is immutable once built. It carries the electrical
parameters needed by the power-flow solver and the directed edge list used
for message passing (every branch contributes both orientations).
"""
from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BUS_KINDS = ("slack", "pv", "pq")
TECHNOLOGIES = ("thermal", "hydro", "wind", "solar", "other")

BUS_HEADER = ["id", "region", "base_kv", "kind"]
BRANCH_HEADER = ["from", "to", "r_pu", "x_pu", "rating_mva"]
GEN_HEADER = ["bus", "p_min", "p_max", "q_min", "q_max", "tech", "dispatchable"]
# Optional trailing columns; written by write_grid, accepted by load_grid.
BUS_OPTIONAL = ["p_load_mw", "q_load_mvar"]
GEN_OPTIONAL = ["v_set_pu"]

RATING_SCALE = 3.5
MAX_REGIONS = 3


class GridError(ValueError):
    """Base class for grid parsing/validation failures."""


class GridParseError(GridError):
    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class GridValidationError(GridError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    region: int
    base_kv: float
    kind: str
    p_load_mw: float = 0.0
    q_load_mvar: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    rating_mva: float


@dataclass(frozen=True)
class GeneratorSpec:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    technology: str
    dispatchable: bool
    v_set_pu: float = 1.0


@dataclass(frozen=True, eq=True)
class GridGraph:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[GeneratorSpec, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        validate(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @cached_property
    def directed_edges(self) -> np.ndarray:
        """(2·n_branch, 2) int array; branch i yields rows 2i (from→to) and 2i+1 (to→from)."""
        edges = np.empty((2 * self.n_branch, 2), dtype=np.int64)
        edges[0::2, 0] = self.from_idx
        edges[0::2, 1] = self.to_idx
        edges[1::2, 0] = self.to_idx
        edges[1::2, 1] = self.from_idx
        edges.setflags(write=False)
        return edges

    @cached_property
    def from_idx(self) -> np.ndarray:
        return _frozen(np.array([b.from_bus for b in self.branches], dtype=np.int64))

    @cached_property
    def to_idx(self) -> np.ndarray:
        return _frozen(np.array([b.to_bus for b in self.branches], dtype=np.int64))

    @cached_property
    def impedance(self) -> np.ndarray:
        return _frozen(np.array([complex(b.r, b.x) for b in self.branches], dtype=complex))

    @cached_property
    def ratings(self) -> np.ndarray:
        return _frozen(np.array([b.rating_mva for b in self.branches], dtype=float))

    @cached_property
    def slack(self) -> int:
        return next(b.id for b in self.buses if b.kind == "slack")

    @cached_property
    def pv(self) -> np.ndarray:
        return _frozen(np.array([b.id for b in self.buses if b.kind == "pv"], dtype=np.int64))

    @cached_property
    def pq(self) -> np.ndarray:
        return _frozen(np.array([b.id for b in self.buses if b.kind == "pq"], dtype=np.int64))

    @cached_property
    def regions(self) -> np.ndarray:
        return _frozen(np.array([b.region for b in self.buses], dtype=np.int64))

    @property
    def n_region(self) -> int:
        return int(self.regions.max()) + 1 if self.n_bus else 0

    @cached_property
    def base_load(self) -> np.ndarray:
        """(n_bus, 2) base active/reactive demand in MW/MVAr."""
        return _frozen(np.array([[b.p_load_mw, b.q_load_mvar] for b in self.buses], dtype=float).reshape(-1, 2))

    def __hash__(self):
        return hash((self.buses, self.branches, self.generators))


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def validate(grid: GridGraph) -> None:
    """Raise GridValidationError naming the first violated invariant."""
    n = len(grid.buses)
    if n == 0:
        raise GridValidationError("grid has no buses")
    ids = [b.id for b in grid.buses]
    if ids != list(range(n)):
        raise GridValidationError("bus ids must be contiguous 0..N-1 in order")
    for b in grid.buses:
        if b.kind not in BUS_KINDS:
            raise GridValidationError(f"bus {b.id}: unknown kind {b.kind!r}")
        if not 0 <= b.region < MAX_REGIONS:
            raise GridValidationError(f"bus {b.id}: region {b.region} outside 0..{MAX_REGIONS - 1}")
    n_slack = sum(b.kind == "slack" for b in grid.buses)
    if n_slack == 0:
        raise GridValidationError("no slack bus")
    if n_slack > 1:
        raise GridValidationError(f"{n_slack} slack buses; exactly one required")
    for i, br in enumerate(grid.branches):
        for end in (br.from_bus, br.to_bus):
            if not 0 <= end < n:
                raise GridValidationError(f"branch {i}: unknown bus id {end}")
        if br.from_bus == br.to_bus:
            raise GridValidationError(f"branch {i}: from_bus equals to_bus")
        if br.x == 0:
            raise GridValidationError(f"branch {i}: zero reactance")
        if not br.rating_mva > 0:
            raise GridValidationError(f"branch {i}: rating_mva must be positive")
    for i, g in enumerate(grid.generators):
        if not 0 <= g.bus < n:
            raise GridValidationError(f"generator {i}: unknown bus id {g.bus}")
        if g.p_min > g.p_max:
            raise GridValidationError(f"generator {i}: p_min > p_max")
        if g.technology not in TECHNOLOGIES:
            raise GridValidationError(f"generator {i}: unknown technology {g.technology!r}")
    if not is_connected(n, [(b.from_bus, b.to_bus) for b in grid.branches], start=ids[[b.kind for b in grid.buses].index("slack")]):
        raise GridValidationError("graph is not connected")


def is_connected(n: int, pairs: Iterable[tuple[int, int]], start: int = 0) -> bool:
    adj: list[list[int]] = [[] for _ in range(n)]
    for f, t in pairs:
        adj[f].append(t)
        adj[t].append(f)
    seen = {start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == n


def node_degrees(grid: GridGraph) -> np.ndarray:
    """Undirected branch incidences per bus (parallel branches count separately)."""
    deg = np.zeros(grid.n_bus, dtype=np.int64)
    np.add.at(deg, grid.from_idx, 1)
    np.add.at(deg, grid.to_idx, 1)
    return deg


# --- CSV I/O -----------------------------------------------------------------

def _read_rows(path, required: Sequence[str], optional: Sequence[str] = ()):
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise GridParseError(path, 1, "missing header row") from None
        header = [h.strip() for h in header]
        if header[: len(required)] != list(required):
            raise GridParseError(path, 1, f"expected header {','.join(required)}, got {','.join(header)}")
        extra = header[len(required):]
        if any(col not in optional for col in extra):
            raise GridParseError(path, 1, f"unexpected columns {extra}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise GridParseError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
            yield lineno, dict(zip(header, (c.strip() for c in row)))


def _num(path, lineno, rec, key, kind=float):
    try:
        return kind(rec[key])
    except ValueError:
        raise GridParseError(path, lineno, f"column {key!r}: cannot parse {rec[key]!r}") from None


def _flag(path, lineno, value: str) -> bool:
    v = value.lower()
    if v in ("1", "true", "yes"):
        return True
    if v in ("0", "false", "no"):
        return False
    raise GridParseError(path, lineno, f"column 'dispatchable': cannot parse {value!r}")


def load_grid(bus_csv, branch_csv, gen_csv) -> GridGraph:
    """Parse the three grid CSV files and return a validated GridGraph."""
    buses = []
    for ln, rec in _read_rows(bus_csv, BUS_HEADER, BUS_OPTIONAL):
        buses.append(Bus(
            id=_num(bus_csv, ln, rec, "id", int),
            region=_num(bus_csv, ln, rec, "region", int),
            base_kv=_num(bus_csv, ln, rec, "base_kv"),
            kind=rec["kind"],
            p_load_mw=_num(bus_csv, ln, rec, "p_load_mw") if "p_load_mw" in rec else 0.0,
            q_load_mvar=_num(bus_csv, ln, rec, "q_load_mvar") if "q_load_mvar" in rec else 0.0,
        ))
    branches = []
    for ln, rec in _read_rows(branch_csv, BRANCH_HEADER):
        branches.append(Branch(
            from_bus=_num(branch_csv, ln, rec, "from", int),
            to_bus=_num(branch_csv, ln, rec, "to", int),
            r=_num(branch_csv, ln, rec, "r_pu"),
            x=_num(branch_csv, ln, rec, "x_pu"),
            rating_mva=_num(branch_csv, ln, rec, "rating_mva"),
        ))
    gens = []
    for ln, rec in _read_rows(gen_csv, GEN_HEADER, GEN_OPTIONAL):
        gens.append(GeneratorSpec(
            bus=_num(gen_csv, ln, rec, "bus", int),
            p_min=_num(gen_csv, ln, rec, "p_min"),
            p_max=_num(gen_csv, ln, rec, "p_max"),
            q_min=_num(gen_csv, ln, rec, "q_min"),
            q_max=_num(gen_csv, ln, rec, "q_max"),
            technology=rec["tech"],
            dispatchable=_flag(gen_csv, ln, rec["dispatchable"]),
            v_set_pu=_num(gen_csv, ln, rec, "v_set_pu") if "v_set_pu" in rec else 1.0,
        ))
    return GridGraph(buses, branches, gens)


def _fmt(x: float) -> str:
    return repr(float(x))


def grid_to_csv(grid: GridGraph) -> dict[str, str]:
    """Serialize to the three CSV documents keyed by file name."""
    out = {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BUS_HEADER + BUS_OPTIONAL)
    for b in grid.buses:
        w.writerow([b.id, b.region, _fmt(b.base_kv), b.kind, _fmt(b.p_load_mw), _fmt(b.q_load_mvar)])
    out["bus.csv"] = buf.getvalue()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BRANCH_HEADER)
    for br in grid.branches:
        w.writerow([br.from_bus, br.to_bus, _fmt(br.r), _fmt(br.x), _fmt(br.rating_mva)])
    out["branch.csv"] = buf.getvalue()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GEN_HEADER + GEN_OPTIONAL)
    for g in grid.generators:
        w.writerow([g.bus, _fmt(g.p_min), _fmt(g.p_max), _fmt(g.q_min), _fmt(g.q_max),
                    g.technology, int(g.dispatchable), _fmt(g.v_set_pu)])
    out["gen.csv"] = buf.getvalue()
    return out


def write_grid(grid: GridGraph, directory) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, text in grid_to_csv(grid).items():
        p = directory / name
        p.write_text(text, encoding="utf-8")
        paths[name] = p
    return paths


def read_grid_dir(directory) -> GridGraph:
    d = Path(directory)
    return load_grid(d / "bus.csv", d / "branch.csv", d / "gen.csv")


# --- NREL-118-shaped builder ---------------------------------------------------

def _embedded(name: str) -> list[dict[str, str]]:
    text = resources.files("gridcast.data").joinpath(name).read_text(encoding="utf-8")
    return list(csv.DictReader(io.StringIO(text)))


def base_branch_table() -> list[dict[str, float]]:
    """Embedded IEEE-118 branch data with parallel circuits merged (179 rows).

    ``base_rating_mva`` is the pre-scaling rating; the builder multiplies it
    by ``RATING_SCALE``.
    """
    rows = []
    for rec in _embedded("ieee118_branch.csv"):
        rows.append({
            "from": int(rec["from"]), "to": int(rec["to"]),
            "r_pu": float(rec["r_pu"]), "x_pu": float(rec["x_pu"]),
            "base_rating_mva": float(rec["base_rating_mva"]),
            "kind": rec["kind"], "circuits": int(rec["circuits"]),
        })
    return rows


# Technology mix for the zero-dispatch units of the source case
# (synchronous condensers there). Counts sum to 35.
_RENEWABLE_MIX = (("wind", 12, (80.0, 220.0)), ("solar", 10, (60.0, 180.0)),
                  ("hydro", 6, (50.0, 150.0)), ("other", 7, (0.0, 0.0)))


def build_nrel118_like(seed: int = 0) -> GridGraph:
    """Deterministic 118-bus / 179-branch grid with a renewable-heavy generator mix.

    Topology, impedances and base loads come from the IEEE 118-bus case.
    Units that carry dispatch in the source case become thermal plants; the
    seed decides which of the remaining generator buses host wind, solar,
    hydro, or condenser-only (``other``) units and their capacities.
    """
    bus_rows = _embedded("ieee118_bus.csv")
    gen_rows = _embedded("ieee118_gen.csv")
    rng = np.random.default_rng(seed)

    thermal = [g for g in gen_rows if float(g["p_ref_mw"]) > 0]
    spare = [g for g in gen_rows if float(g["p_ref_mw"]) == 0]
    assert len(spare) == sum(c for _, c, _ in _RENEWABLE_MIX)
    order = rng.permutation(len(spare))
    techs: dict[int, tuple[str, float]] = {}
    k = 0
    for tech, count, (lo, hi) in _RENEWABLE_MIX:
        for _ in range(count):
            g = spare[order[k]]
            cap = float(np.round(rng.uniform(lo, hi), 1)) if hi > 0 else 0.0
            techs[int(g["bus"])] = (tech, cap)
            k += 1

    gens = []
    for g in gen_rows:
        bus = int(g["bus"])
        if float(g["p_ref_mw"]) > 0:
            tech, p_max, disp = "thermal", float(g["p_max_mw"]), True
        else:
            tech, p_max = techs[bus]
            disp = tech in ("hydro", "thermal")
        gens.append(GeneratorSpec(
            bus=bus, p_min=0.0, p_max=p_max,
            q_min=float(g["q_min_mvar"]), q_max=float(g["q_max_mvar"]),
            technology=tech, dispatchable=disp, v_set_pu=float(g["v_set_pu"]),
        ))
    slack_bus = max(thermal, key=lambda g: float(g["p_max_mw"]))["bus"]
    gen_buses = {g.bus for g in gens}
    buses = []
    for rec in bus_rows:
        i = int(rec["id"])
        kind = "slack" if i == int(slack_bus) else ("pv" if i in gen_buses else "pq")
        buses.append(Bus(i, int(rec["region"]), float(rec["base_kv"]), kind,
                         float(rec["p_load_mw"]), float(rec["q_load_mvar"])))
    branches = [Branch(r["from"], r["to"], r["r_pu"], r["x_pu"], RATING_SCALE * r["base_rating_mva"])
                for r in base_branch_table()]
    return GridGraph(buses, branches, gens)
