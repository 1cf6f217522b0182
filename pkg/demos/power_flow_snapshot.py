"""Solve one hour of the built-in 118-bus grid with AC and DC power flow and compare them.

    python demos/power_flow_snapshot.py [hour]
"""
import sys

import numpy as np

from gridcast.dataset import GenerationOptions, dispatch
from gridcast.grid import build_nrel118_like
from gridcast.powerflow import solve_ac_power_flow, solve_dc_power_flow
from gridcast.profiles import synthesize_profiles

hour = int(sys.argv[1]) if len(sys.argv) > 1 else 12
grid = build_nrel118_like(0)
print(f"grid: {grid.n_bus} buses, {grid.n_branch} branches, slack bus {grid.slack}")

profiles = synthesize_profiles(grid, max(hour + 1, 49), seed=0)
inj = dispatch(grid, profiles, GenerationOptions(seed=0)).at(hour)
print(f"hour {hour}: total load {profiles.load[:, hour].sum():.1f} MW, "
      f"renewable share {profiles.renewable_share()[hour]:.1%}")

ac = solve_ac_power_flow(grid, inj)
print(f"AC: converged in {ac.iterations} iterations, mismatch history "
      + " ".join(f"{m:.1e}" for m in ac.mismatch_history))
print(f"    |V| range {ac.v_mag.min():.4f} .. {ac.v_mag.max():.4f} p.u., "
      f"angle range {ac.v_ang.min():.2f} .. {ac.v_ang.max():.2f} deg")
print(f"    losses {ac.p.sum():.2f} MW, max branch loading {ac.loading_pct.max():.1f}%")

dc = solve_dc_power_flow(grid, inj.p_mw / 100.0)
gap = np.abs(np.degrees(dc.theta) - ac.v_ang)
print(f"DC: angle gap to AC  mean {gap.mean():.3f} deg, max {gap.max():.3f} deg")
worst = np.argsort(ac.loading_pct)[-3:][::-1]
for k in worst:
    br = grid.branches[k]
    print(f"    branch {br.from_bus}->{br.to_bus}: AC {ac.p_from[k]:8.2f} MW, DC {dc.flow[k] * 100:8.2f} MW, "
          f"loading {ac.loading_pct[k]:.1f}%")
