"""Synthetic hourly regional load, wind and solar series.

Stand-in for measured regional profiles: each region gets a diurnal +
weekly + annual load shape with AR(1) noise, a clear-sky solar curve
modulated by an AR(1) cloud index, and wind from an AR(1) latent speed
pushed through a Weibull marginal and a turbine power curve.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from gridcast.grid import GridGraph

SUNRISE, SUNSET = 6, 19  # first / last hour of the day with non-zero solar


@dataclass(frozen=True)
class ProfileParams:
    diurnal_amp: float = 0.15
    weekly_amp: float = 0.04
    annual_amp: float = 0.08
    load_phi: float = 0.9
    load_noise: float = 0.03  # stationary std of the AR(1) load term
    cloud_phi: float = 0.8
    wind_phi: float = 0.95
    weibull_k: float = 2.0
    weibull_scale: float = 8.0  # m/s
    cut_in: float = 3.0
    rated: float = 12.0
    cut_out: float = 25.0


@dataclass
class ProfileSeries:
    """Hourly regional series, each shaped (n_region, T), in MW."""

    load: np.ndarray
    wind: np.ndarray
    solar: np.ndarray

    @property
    def horizon(self) -> int:
        return self.load.shape[1]

    def renewable_share(self) -> np.ndarray:
        total = self.load.sum(axis=0)
        ren = self.wind.sum(axis=0) + self.solar.sum(axis=0)
        return np.divide(ren, total, out=np.zeros_like(total), where=total > 0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "region", "load_mw", "wind_mw", "solar_mw"])
        for t in range(self.horizon):
            for r in range(self.load.shape[0]):
                w.writerow([t, r, repr(float(self.load[r, t])), repr(float(self.wind[r, t])),
                            repr(float(self.solar[r, t]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path) -> "ProfileSeries":
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        T = max(int(r["t"]) for r in rows) + 1
        R = max(int(r["region"]) for r in rows) + 1
        arrs = {k: np.zeros((R, T)) for k in ("load_mw", "wind_mw", "solar_mw")}
        for r in rows:
            for k, a in arrs.items():
                a[int(r["region"]), int(r["t"])] = float(r[k])
        return cls(arrs["load_mw"], arrs["wind_mw"], arrs["solar_mw"])


def _ar1(rng, phi: float, n_series: int, T: int) -> np.ndarray:
    """Unit-variance stationary AR(1) paths, shape (n_series, T)."""
    out = np.empty((n_series, T))
    innov = rng.standard_normal((n_series, T)) * np.sqrt(1.0 - phi * phi)
    out[:, 0] = rng.standard_normal(n_series)
    for t in range(1, T):
        out[:, t] = phi * out[:, t - 1] + innov[:, t]
    return out


def clear_sky(hour_of_day: np.ndarray) -> np.ndarray:
    h = np.asarray(hour_of_day)
    shape = np.sin(np.pi * (h - SUNRISE + 0.5) / (SUNSET - SUNRISE + 1))
    return np.where((h >= SUNRISE) & (h <= SUNSET), np.clip(shape, 0.0, None), 0.0)


def wind_power_curve(speed: np.ndarray, p: ProfileParams) -> np.ndarray:
    cf = np.clip((speed - p.cut_in) / (p.rated - p.cut_in), 0.0, 1.0) ** 3
    return np.where(speed >= p.cut_out, 0.0, cf)


def regional_capacity(grid: GridGraph, technology: str) -> np.ndarray:
    cap = np.zeros(grid.n_region)
    for g in grid.generators:
        if g.technology == technology:
            cap[grid.regions[g.bus]] += g.p_max
    return cap


def synthesize_profiles(grid: GridGraph, horizon_hours: int, seed: int,
                        params: ProfileParams = ProfileParams()) -> ProfileSeries:
    if horizon_hours < 49:
        raise ValueError("horizon_hours must be at least 49 (one 48-step window plus a target)")
    rng = np.random.default_rng(seed)
    R, T = grid.n_region, horizon_hours
    t = np.arange(T)
    hod = t % 24
    dow = (t // 24) % 7

    base = np.zeros(R)
    np.add.at(base, grid.regions, grid.base_load[:, 0])
    phase = np.arange(R, dtype=float)  # one-hour stagger between regions
    diurnal = np.cos(2 * np.pi * (hod[None, :] - 18.0 - phase[:, None]) / 24.0)
    weekly = np.where(dow < 5, 2.0 / 7.0, -5.0 / 7.0)[None, :]  # zero mean over a week
    annual = np.cos(2 * np.pi * t / 8760.0)[None, :]
    noise = params.load_noise * _ar1(rng, params.load_phi, R, T)
    shape = 1.0 + params.diurnal_amp * diurnal + params.weekly_amp * weekly + params.annual_amp * annual + noise
    load = np.clip(base[:, None] * shape, 0.0, None)

    cloud = 0.3 + 0.7 * ndtr(1.2 + _ar1(rng, params.cloud_phi, R, T))
    solar = regional_capacity(grid, "solar")[:, None] * clear_sky(hod)[None, :] * cloud

    u = ndtr(_ar1(rng, params.wind_phi, R, T))
    speed = params.weibull_scale * (-np.log1p(-np.clip(u, 0.0, 1.0 - 1e-15))) ** (1.0 / params.weibull_k)
    wind = regional_capacity(grid, "wind")[:, None] * wind_power_curve(speed, params)

    return ProfileSeries(load=load, wind=wind, solar=solar)
