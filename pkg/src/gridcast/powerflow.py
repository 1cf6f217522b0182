"""AC (Newton-Raphson, polar form) and DC power flow on a GridGraph.

Internally everything is per-unit on ``BASE_MVA``; solutions are reported in
MW / MVAr / degrees / percent.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from gridcast.grid import GridGraph

BASE_MVA = 100.0


class PowerFlowError(RuntimeError):
    pass


class NonConvergence(PowerFlowError):
    def __init__(self, iterations: int, final_mismatch: float):
        self.iterations = iterations
        self.final_mismatch = final_mismatch
        super().__init__(f"Newton-Raphson did not converge after {iterations} iterations "
                         f"(max mismatch {final_mismatch:.3e} p.u.)")


class SingularJacobian(PowerFlowError):
    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"singular Jacobian at iteration {iteration}")


@dataclass
class InjectionSet:
    """Net bus injections (generation minus demand).

    ``v_setpoint`` is a full-length vector; only its pv and slack entries are
    read. The slack entries of ``p_mw``/``q_mvar`` and pv entries of
    ``q_mvar`` are ignored (free variables of the solve).
    """

    p_mw: np.ndarray
    q_mvar: np.ndarray
    v_setpoint: np.ndarray

    @classmethod
    def flat(cls, n_bus: int) -> "InjectionSet":
        return cls(np.zeros(n_bus), np.zeros(n_bus), np.ones(n_bus))

    def scaled(self, factor: float) -> "InjectionSet":
        return InjectionSet(self.p_mw * factor, self.q_mvar * factor, self.v_setpoint.copy())


@dataclass
class PowerFlowSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray  # degrees
    p: np.ndarray  # MW
    q: np.ndarray  # MVAr
    p_from: np.ndarray
    q_from: np.ndarray
    p_to: np.ndarray
    q_to: np.ndarray
    loading_pct: np.ndarray
    iterations: int = 0
    mismatch_history: list[float] = field(default_factory=list)

    @property
    def voltage(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * np.deg2rad(self.v_ang))

    def node_features(self) -> np.ndarray:
        """(n_bus, 4): |V| p.u., angle deg, P MW, Q MVAr."""
        return np.column_stack([self.v_mag, self.v_ang, self.p, self.q])

    def edge_features(self) -> np.ndarray:
        """(n_branch, 5): P/Q at the sending end, P/Q at the receiving end, loading %."""
        return np.column_stack([self.p_from, self.q_from, self.p_to, self.q_to, self.loading_pct])


def build_ybus(grid: GridGraph) -> sp.csr_matrix:
    """Bus admittance matrix for tap-free, shunt-free series branches."""
    n = grid.n_bus
    f, t = grid.from_idx, grid.to_idx
    y = 1.0 / grid.impedance if grid.n_branch else np.zeros(0, dtype=complex)
    rows = np.concatenate([f, t, f, t])
    cols = np.concatenate([f, t, t, f])
    vals = np.concatenate([y, y, -y, -y])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n), dtype=complex)


def _mismatch(V, Ybus, Sbus, pvpq, pq):
    mis = V * np.conj(Ybus @ V) - Sbus
    return np.concatenate([mis[pvpq].real, mis[pq].imag])


def _jacobian(V, Ybus, pvpq, pq):
    Ibus = Ybus @ V
    diagV = sp.diags(V)
    diagI = sp.diags(Ibus)
    diagVnorm = sp.diags(V / np.abs(V))
    dS_dVm = diagV @ np.conj(Ybus @ diagVnorm) + np.conj(diagI) @ diagVnorm
    dS_dVa = 1j * diagV @ np.conj(diagI - Ybus @ diagV)
    dS_dVa = dS_dVa.tocsr()
    dS_dVm = dS_dVm.tocsr()
    J11 = dS_dVa[pvpq][:, pvpq].real
    J12 = dS_dVm[pvpq][:, pq].real
    J21 = dS_dVa[pq][:, pvpq].imag
    J22 = dS_dVm[pq][:, pq].imag
    return sp.bmat([[J11, J12], [J21, J22]], format="csc")


def solve_ac_power_flow(grid: GridGraph, inj: InjectionSet, tol: float = 1e-8, max_iter: int = 30,
                        ybus: sp.csr_matrix | None = None) -> PowerFlowSolution:
    """Newton-Raphson from a flat start.

    Converged when the largest P (pv, pq) / Q (pq) mismatch is at most
    ``tol`` p.u. Pass a precomputed ``ybus`` to skip rebuilding it.
    """
    Ybus = build_ybus(grid) if ybus is None else ybus
    n = grid.n_bus
    pv, pq = grid.pv, grid.pq
    pvpq = np.concatenate([pv, pq])
    slack = grid.slack
    Sbus = (np.asarray(inj.p_mw, dtype=float) + 1j * np.asarray(inj.q_mvar, dtype=float)) / BASE_MVA

    Vm = np.ones(n)
    Va = np.zeros(n)
    gen_like = np.concatenate([[slack], pv]).astype(np.int64)
    Vm[gen_like] = np.asarray(inj.v_setpoint, dtype=float)[gen_like]
    V = Vm * np.exp(1j * Va)

    npv, npq = len(pv), len(pq)
    F = _mismatch(V, Ybus, Sbus, pvpq, pq)
    norm = float(np.max(np.abs(F))) if F.size else 0.0
    history = [norm]
    it = 0
    while norm > tol:
        if it >= max_iter:
            raise NonConvergence(it, norm)
        it += 1
        J = _jacobian(V, Ybus, pvpq, pq)
        try:
            dx = splu(J).solve(-F)
        except RuntimeError:
            raise SingularJacobian(it) from None
        if not np.all(np.isfinite(dx)):
            raise SingularJacobian(it)
        Va[pv] += dx[:npv]
        Va[pq] += dx[npv:npv + npq]
        Vm[pq] += dx[npv + npq:]
        V = Vm * np.exp(1j * Va)
        F = _mismatch(V, Ybus, Sbus, pvpq, pq)
        norm = float(np.max(np.abs(F)))
        history.append(norm)
        if not np.isfinite(norm):
            raise NonConvergence(it, norm)

    return _assemble(grid, V, Ybus, it, history)


def _assemble(grid: GridGraph, V, Ybus, iterations, history) -> PowerFlowSolution:
    S = V * np.conj(Ybus @ V) * BASE_MVA
    f, t = grid.from_idx, grid.to_idx
    y = 1.0 / grid.impedance if grid.n_branch else np.zeros(0, dtype=complex)
    I_f = y * (V[f] - V[t])
    S_f = V[f] * np.conj(I_f) * BASE_MVA
    S_t = V[t] * np.conj(-I_f) * BASE_MVA
    loading = 100.0 * np.maximum(np.abs(S_f), np.abs(S_t)) / grid.ratings if grid.n_branch else np.zeros(0)
    return PowerFlowSolution(
        v_mag=np.abs(V), v_ang=np.rad2deg(np.angle(V)), p=S.real, q=S.imag,
        p_from=S_f.real, q_from=S_f.imag, p_to=S_t.real, q_to=S_t.imag,
        loading_pct=loading, iterations=iterations, mismatch_history=history,
    )


@dataclass
class DCSolution:
    theta: np.ndarray  # rad
    flow: np.ndarray  # p.u., positive from -> to
    p_inj: np.ndarray  # p.u., slack entry replaced so the total is zero


def solve_dc_power_flow(grid: GridGraph, p_inj) -> DCSolution:
    """Linearised flow B·θ = P with the slack angle pinned at zero (inputs in p.u.)."""
    n = grid.n_bus
    p = np.array(p_inj, dtype=float)
    slack = grid.slack
    p[slack] = -(p.sum() - p[slack])
    f, t = grid.from_idx, grid.to_idx
    b = 1.0 / np.array([br.x for br in grid.branches])
    B = sp.csr_matrix((np.concatenate([b, b, -b, -b]),
                       (np.concatenate([f, t, f, t]), np.concatenate([f, t, t, f]))), shape=(n, n))
    keep = np.array([i for i in range(n) if i != slack], dtype=np.int64)
    theta = np.zeros(n)
    if keep.size:
        try:
            theta[keep] = splu(B[keep][:, keep].tocsc()).solve(p[keep])
        except RuntimeError:
            raise PowerFlowError("singular B matrix (disconnected network)") from None
    flow = (theta[f] - theta[t]) * b
    return DCSolution(theta=theta, flow=flow, p_inj=p)
