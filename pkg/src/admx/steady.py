"""Dispatch command -> steady operating point mapping.

The PCC voltage follows from a linearized voltage-drop relation coupled with
the Q-V droop of every unit; each unit's terminal quantities then follow from
its power balance and virtual impedance.  The power constant 1.5 of the
amplitude-invariant dq transform appears wherever power meets dq quantities.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from ._kernels import POWER_FACTOR
from .analytic import OperatingPoint, effective_virtual_impedance
from .config import DispatchCommand, GridParams, MicrogridConfig

log = logging.getLogger(__name__)


class SteadyStateError(RuntimeError):
    pass


class ConvergenceError(SteadyStateError):
    def __init__(self, msg, best=None, residual=None):
        super().__init__(msg)
        self.best = best
        self.residual = residual


@dataclass(frozen=True)
class UncertainParams:
    """Droop and virtual-impedance values of every unit, in unit order."""
    ids: tuple
    d_q: np.ndarray
    r_v: np.ndarray
    l_v: np.ndarray
    provenance: str = "nominal"

    def __post_init__(self):
        for name in ("d_q", "r_v", "l_v"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
            if getattr(self, name).shape != (len(self.ids),):
                raise ValueError(f"{name} must have one entry per unit")

    def unit(self, uid):
        k = self.ids.index(uid)
        return self.d_q[k], self.r_v[k], self.l_v[k]

    def as_vector(self):
        return np.concatenate([self.d_q, self.r_v, self.l_v])

    @classmethod
    def from_vector(cls, ids, v, provenance="sampled"):
        n = len(ids)
        return cls(tuple(ids), v[:n], v[n:2 * n], v[2 * n:], provenance)

    def to_dict(self):
        return {"ids": list(self.ids), "d_q": self.d_q.tolist(), "r_v": self.r_v.tolist(),
                "l_v": self.l_v.tolist(), "provenance": self.provenance}


def nominal_params(config: MicrogridConfig) -> UncertainParams:
    """True droop and effective terminal virtual impedance of every unit."""
    zv = [effective_virtual_impedance(v) for v in config.vscs]
    return UncertainParams(tuple(config.ids), [v.d_q for v in config.vscs],
                           [z[0] for z in zv], [z[1] for z in zv], "nominal")


@dataclass
class SystemOperatingState:
    u_pcc: float
    q_pcc: float
    ops: list
    commands: list = field(default_factory=list)
    q_e: np.ndarray = None
    ids: tuple = ()

    def op(self, uid):
        return self.ops[self.ids.index(uid)]


def solve_pcc(commands, params: UncertainParams, grid: GridParams, s_rated):
    """PCC voltage, total reactive injection and per-unit reactive output.

    ``commands`` are per-unit dispatch commands, ``s_rated`` the unit ratings.
    Solves the 2x2 linear system in ``(u_pcc, q_pcc)`` exactly.
    """
    s_rated = np.asarray(s_rated, dtype=float)
    p_tot = sum(c.p_ref * s for c, s in zip(commands, s_rated))
    q_ref = np.array([c.q_ref * s for c, s in zip(commands, s_rated)])
    dq = params.d_q
    k = 1.0 / POWER_FACTOR
    un = grid.u_nom
    # rows: q_pcc + sum(dq) u_pcc = sum(q_ref) + sum(dq) un
    #       u_pcc - k x_g q_pcc / un = un + k r_g p_tot / un
    m = np.array([[dq.sum(), 1.0], [1.0, -k * grid.x_g / un]])
    rhs = np.array([q_ref.sum() + dq.sum() * un, un + k * grid.r_g * p_tot / un])
    if abs(np.linalg.det(m)) < 1e-12 * np.abs(m).max() ** 2:
        raise SteadyStateError("singular PCC system: droop aggregation cancels grid reactance")
    u_pcc, q_pcc = np.linalg.solve(m, rhs)
    q_e = q_ref + dq * (un - u_pcc)
    return float(u_pcc), float(q_pcc), q_e


def _vsc_residual(z, p_e, q_e, u_pcc, r_v, x_v):
    ud, uq, i_d, i_q, ev = z
    c = POWER_FACTOR
    return np.array([
        c * (ud * i_d + uq * i_q) - p_e,
        c * (uq * i_d - ud * i_q) - q_e,
        ud * ud + uq * uq - u_pcc * u_pcc,
        ud - ev + r_v * i_d - x_v * i_q,
        uq + r_v * i_q + x_v * i_d,
    ])


def _vsc_jacobian(z, r_v, x_v):
    ud, uq, i_d, i_q, ev = z
    c = POWER_FACTOR
    return np.array([
        [c * i_d, c * i_q, c * ud, c * uq, 0.0],
        [-c * i_q, c * i_d, c * uq, -c * ud, 0.0],
        [2 * ud, 2 * uq, 0.0, 0.0, 0.0],
        [1.0, 0.0, r_v, -x_v, -1.0],
        [0.0, 1.0, x_v, r_v, 0.0],
    ])


def solve_vsc_op(p_e, q_e, u_pcc, r_v, l_v, grid: GridParams, s_base=None,
                 tol=1e-8, max_iter=50, history=None):
    """Newton-Raphson solution of one unit's terminal operating point.

    Residuals are measured in per-unit (power over ``s_base``, voltages over
    ``u_nom``).  ``history``, if a list, receives the residual norm per iterate.
    """
    if not u_pcc > 0:
        raise SteadyStateError("u_pcc must be positive")
    x_v = grid.omega_n * l_v
    sb = s_base or max(np.hypot(p_e, q_e), 1e3)
    un = grid.u_nom
    wts = np.array([1 / sb, 1 / sb, 1 / un ** 2, 1 / un, 1 / un])
    c = POWER_FACTOR

    def newton(z):
        best = z.copy()
        best_r = np.inf
        for _ in range(max_iter + 1):
            f = _vsc_residual(z, p_e, q_e, u_pcc, r_v, x_v)
            r = np.max(np.abs(f * wts))
            if history is not None:
                history.append(r)
            if r < best_r:
                best, best_r = z.copy(), r
            if r < tol:
                return z, r
            jac = _vsc_jacobian(z, r_v, x_v)
            if abs(np.linalg.det(jac * wts[:, None])) < 1e-14:
                raise np.linalg.LinAlgError("singular Jacobian")
            z = z - np.linalg.solve(jac, f)
        raise ConvergenceError(f"no convergence after {max_iter} iterations (residual {best_r:.2e})",
                               best=best, residual=best_r)

    z0 = np.array([u_pcc, 0.0, p_e / (c * u_pcc), -q_e / (c * u_pcc), u_pcc])
    try:
        z, _ = newton(z0)
    except np.linalg.LinAlgError:
        # retry from a perturbed start before giving up
        try:
            z, _ = newton(z0 * (1 + 1e-3) + np.array([0, 1e-3 * u_pcc, 0, 0, 0]))
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular Jacobian at Newton iterate") from None
    return OperatingPoint(z[0], z[1], z[2], z[3], e_v=z[4], omega0=grid.omega_n)


def vsc_residual_pu(op: OperatingPoint, p_e, q_e, u_pcc, r_v, l_v, grid, s_base):
    f = _vsc_residual([op.u_d, op.u_q, op.i_d, op.i_q, op.e_v], p_e, q_e, u_pcc,
                      r_v, grid.omega_n * l_v)
    un = grid.u_nom
    return float(np.max(np.abs(f * np.array([1 / s_base, 1 / s_base, 1 / un ** 2, 1 / un, 1 / un]))))


def solve_system(config: MicrogridConfig, commands=None, params: UncertainParams = None):
    """Compose the PCC and per-unit solutions for a command list (unit order)."""
    commands = commands if commands is not None else config.commands()
    params = params if params is not None else nominal_params(config)
    ratings = [v.s_rated for v in config.vscs]
    u_pcc, q_pcc, q_e = solve_pcc(commands, params, config.grid, ratings)
    ops = []
    for k, (v, c) in enumerate(zip(config.vscs, commands)):
        ops.append(solve_vsc_op(c.p_ref * v.s_rated, q_e[k], u_pcc, params.r_v[k],
                                params.l_v[k], config.grid, s_base=v.s_rated))
    return SystemOperatingState(u_pcc, q_pcc, ops, list(commands), q_e, tuple(config.ids))


class Unobservable(ValueError):
    pass


def estimate_virtual_impedance(nop: OperatingPoint, omega_n=None):
    """Invert the virtual-impedance relations at a nominal operating point."""
    wn = omega_n if omega_n is not None else nop.omega0
    den = nop.i_d ** 2 + nop.i_q ** 2
    if den == 0:
        raise Unobservable("zero current at the nominal operating point: virtual impedance unobservable")
    de = nop.e_v - nop.u_d
    r_v = (nop.i_d * de - nop.i_q * nop.u_q) / den
    l_v = (-nop.i_q * de - nop.i_d * nop.u_q) / (wn * den)
    return r_v, l_v


DEFAULT_BOUNDS = {"d_q": (0.9, 1.1), "r_v": (0.95, 1.05), "l_v": (0.95, 1.05)}


def sample_uncertainty(nominal: UncertainParams, bounds=None, n=21, seed=0):
    """Latin-hypercube samples of the uncertainty set; entry 0 is ``nominal``.

    ``bounds`` maps ``d_q``/``r_v``/``l_v`` to multiplicative ``(lo, hi)`` factors.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    bounds = {**DEFAULT_BOUNDS, **(bounds or {})}
    for name, (lo, hi) in bounds.items():
        if lo > hi:
            raise ValueError(f"inverted bounds for {name}: ({lo}, {hi})")
    out = [nominal]
    if n == 1:
        return out
    m = len(nominal.ids)
    lo = np.concatenate([nominal.d_q * bounds["d_q"][0], nominal.r_v * bounds["r_v"][0],
                         nominal.l_v * bounds["l_v"][0]])
    hi = np.concatenate([nominal.d_q * bounds["d_q"][1], nominal.r_v * bounds["r_v"][1],
                         nominal.l_v * bounds["l_v"][1]])
    u = qmc.LatinHypercube(d=3 * m, seed=seed).random(n - 1)
    for row in u:
        out.append(UncertainParams.from_vector(nominal.ids, lo + row * (hi - lo)))
    return out


def nominal_operating_points(config: MicrogridConfig):
    """Operating points under nominal dispatch with the true parameters."""
    return solve_system(config)
