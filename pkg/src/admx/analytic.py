"""Ground-truth small-signal admittance of a single grid-forming unit.

The unit is linearized numerically around an operating point expressed in its
own steady-state dq frame (virtual EMF on the d axis).  Inputs are the terminal
voltage perturbation, outputs the current drawn from the terminal node, so a
passive unit has a positive-real admittance.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .config import DispatchCommand, GridParams, VscParams, per_unit_base


class NotAtEquilibrium(ValueError):
    pass


class SingularResolvent(ValueError):
    pass


@dataclass(frozen=True)
class OperatingPoint:
    """Steady terminal quantities in the unit frame (SI, injected current)."""
    u_d: float
    u_q: float
    i_d: float
    i_q: float
    e_v: float = float("nan")
    omega0: float = 2 * np.pi * 50

    def as_array(self):
        return np.array([self.u_d, self.u_q, self.i_d, self.i_q])

    def per_unit(self, vsc: VscParams, grid: GridParams):
        b = per_unit_base(vsc, grid)
        return np.array([self.u_d / b.voltage, self.u_q / b.voltage,
                         self.i_d / b.current, self.i_q / b.current])

    @property
    def p(self):
        return K.POWER_FACTOR * (self.u_d * self.i_d + self.u_q * self.i_q)

    @property
    def q(self):
        return K.POWER_FACTOR * (self.u_q * self.i_d - self.u_d * self.i_q)

    @property
    def angle(self):
        """Angle of the terminal voltage in the unit frame."""
        return float(np.arctan2(self.u_q, self.u_d))


@dataclass(frozen=True)
class Admittance2x2:
    y_dd: complex
    y_dq: complex
    y_qd: complex
    y_qq: complex
    f: float

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError("frequency must be positive")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("admittance entries must be finite")

    @property
    def matrix(self):
        return np.array([[self.y_dd, self.y_dq], [self.y_qd, self.y_qq]], dtype=complex)

    @classmethod
    def from_matrix(cls, m, f):
        m = np.asarray(m, dtype=complex)
        return cls(complex(m[0, 0]), complex(m[0, 1]), complex(m[1, 0]), complex(m[1, 1]), float(f))


@dataclass
class StateSpaceModel:
    """``Y(s) = c (sI - a)^-1 b + d + s e``.

    ``e`` carries the capacitor current of LC units, whose filter capacitor sits
    directly on the terminal; it is zero for LCL units.
    """
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    e: np.ndarray = None
    state_labels: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.a.shape[0]
        if self.a.shape != (n, n):
            raise ValueError("a must be square")
        if self.b.shape != (n, 2) or self.c.shape != (2, n) or self.d.shape != (2, 2):
            raise ValueError("inconsistent state-space dimensions")
        if self.e is None:
            self.e = np.zeros((2, 2))

    @property
    def n_states(self):
        return self.a.shape[0]

    def poles(self):
        return np.linalg.eigvals(self.a)


FEEDFORWARD = 0.0
CURRENT_FF = 0.7

_BASE_LABELS = ("delta", "dw", "e_v", "xi_d", "xi_q", "if_d", "if_q")
_LCL_LABELS = ("uc_d", "uc_q", "i2_d", "i2_q")


def state_labels(vsc: VscParams):
    return _BASE_LABELS + (_LCL_LABELS if vsc.is_lcl else ())


def state_scale(vsc: VscParams, grid: GridParams):
    """Per-unit base of every unit state."""
    b = per_unit_base(vsc, grid)
    s = [1.0, grid.omega_n, b.voltage, b.current, b.current, b.current, b.current]
    if vsc.is_lcl:
        s += [b.voltage, b.voltage, b.current, b.current]
    return np.array(s)


def pack_params(vsc: VscParams, grid: GridParams, p_ref=0.0, q_ref=0.0,
                bias=(0.0, 0.0), kpv_scale=1.0, decoupling=True, feedforward=None):
    """Kernel parameter vector; ``p_ref``/``q_ref`` in W and var."""
    p = np.zeros(K.N_PARAM)
    p[K.P_LF] = vsc.l_f
    p[K.P_LF2] = vsc.l_f2
    p[K.P_CF] = vsc.c_f
    p[K.P_J] = vsc.j_inertia
    p[K.P_DP] = vsc.d_p
    p[K.P_DQ] = vsc.d_q
    p[K.P_KQ] = vsc.k_q
    p[K.P_KPV] = vsc.k_pv * kpv_scale
    p[K.P_KIV] = vsc.k_iv * kpv_scale
    p[K.P_KPI] = vsc.k_pi
    p[K.P_RV] = vsc.r_v
    p[K.P_LV] = vsc.l_v
    p[K.P_RF] = vsc.r_f
    p[K.P_RF2] = vsc.r_f2
    p[K.P_PREF] = p_ref
    p[K.P_QREF] = q_ref
    p[K.P_LCL] = 1.0 if vsc.is_lcl else 0.0
    p[K.P_UNOM] = grid.u_nom
    p[K.P_WN] = grid.omega_n
    p[K.P_BD], p[K.P_BQ] = bias
    p[K.P_DEC] = 1.0 if decoupling else 0.0
    p[K.P_FF] = FEEDFORWARD if feedforward is None else feedforward
    p[K.P_IFF] = CURRENT_FF
    return p


def effective_virtual_impedance(vsc: VscParams):
    """Series impedance seen from the terminal: virtual plus grid-side filter branch."""
    return vsc.r_v + vsc.r_f2, vsc.l_v + vsc.l_f2


def equilibrium_state(vsc: VscParams, grid: GridParams, op: OperatingPoint):
    """Unit state (unit frame, delta = 0) holding ``op`` at rest.

    Returns ``(x, bias, p_ref, q_ref)``: ``bias`` is the q-axis voltage
    reference offset needed when ``op`` is not consistent with the virtual
    impedance, and the references are those balancing both power loops.
    """
    wn = grid.omega_n
    ud, uq, i_d, i_q = op.u_d, op.u_q, op.i_d, op.i_q
    if vsc.is_lcl:
        ucd = ud + vsc.r_f2 * i_d - wn * vsc.l_f2 * i_q
        ucq = uq + vsc.r_f2 * i_q + wn * vsc.l_f2 * i_d
    else:
        ucd, ucq = ud, uq
    ifd = i_d - wn * vsc.c_f * ucq
    ifq = i_q + wn * vsc.c_f * ucd
    ev = ucd + vsc.r_v * i_d - wn * vsc.l_v * i_q
    bq = ucq + vsc.r_v * i_q + wn * vsc.l_v * i_d
    xid = (1 - CURRENT_FF) * i_d
    xiq = (1 - CURRENT_FF) * i_q
    if vsc.k_pi > 0:
        xid += ((1 - FEEDFORWARD) * ucd + vsc.r_f * ifd) / vsc.k_pi
        xiq += ((1 - FEEDFORWARD) * ucq + vsc.r_f * ifq) / vsc.k_pi
    x = [0.0, 0.0, ev, xid, xiq, ifd, ifq]
    if vsc.is_lcl:
        x += [ucd, ucq, i_d, i_q]
    p_ref = op.p
    q_ref = op.q - vsc.d_q * (grid.u_nom - np.hypot(ud, uq))
    return np.array(x), (0.0, bq), p_ref, q_ref


def _eval(p, x, u, du):
    dx = np.empty(x.shape[0])
    aux = np.empty(K.N_AUX)
    K.unit_rhs(p, x, u[0], u[1], du[0], du[1], 0.0, dx, aux)
    return dx, aux


def vsc_dynamics(vsc: VscParams, grid: GridParams, command: DispatchCommand,
                 state, terminal_voltage, terminal_rate=(0.0, 0.0)):
    """State derivative and injected output current (common frame).

    ``terminal_rate`` is the time derivative of the terminal voltage; it only
    matters for LC units, whose capacitor sits on the terminal.
    """
    state = np.asarray(state, dtype=float)
    n = K.N_LCL if vsc.is_lcl else K.N_LC
    if state.shape != (n,):
        raise ValueError(f"{vsc.id}: expected {n} states, got {state.shape}")
    p_ref, q_ref = command.physical(vsc)
    p = pack_params(vsc, grid, p_ref, q_ref)
    dx, aux = _eval(p, state, np.asarray(terminal_voltage, float), np.asarray(terminal_rate, float))
    return dx, np.array([aux[K.A_ICD], aux[K.A_ICQ]])


def residual_pu(vsc, grid, p, x, u):
    """Largest state derivative in per-unit (per-unit state per nominal radian)."""
    dx, _ = _eval(p, x, u, np.zeros(2))
    return float(np.max(np.abs(dx / (state_scale(vsc, grid) * grid.omega_n))))


def jacobians(vsc: VscParams, grid: GridParams, p, x, u, step=1e-6):
    """Central-difference Jacobians of the unit around ``(x, u, du = 0)``.

    Returns ``(A, Bu, Bdu, C, Du, Ddu)`` with output = current drawn into the unit.
    """
    xs = state_scale(vsc, grid)
    us = np.full(2, grid.u_nom)
    dus = us * grid.omega_n
    n = x.shape[0]
    z = np.concatenate([x, u, np.zeros(2)])
    scale = np.concatenate([xs, us, dus])

    def f(v):
        dx, aux = _eval(p, v[:n], v[n:n + 2], v[n + 2:])
        return np.concatenate([dx, [-aux[K.A_ICD], -aux[K.A_ICQ]]])

    m = z.shape[0]
    jac = np.empty((n + 2, m))
    for i in range(m):
        h = step * scale[i]
        zp = z.copy()
        zm = z.copy()
        zp[i] += h
        zm[i] -= h
        jac[:, i] = (f(zp) - f(zm)) / (2 * h)
    A = jac[:n, :n]
    Bu = jac[:n, n:n + 2]
    Bdu = jac[:n, n + 2:]
    C = jac[n:, :n]
    Du = jac[n:, n:n + 2]
    Ddu = jac[n:, n + 2:]
    return A, Bu, Bdu, C, Du, Ddu


def _model_from_jacobians(jac, labels, meta):
    A, Bu, Bdu, C, Du, Ddu = jac
    # s (sI - A)^-1 = I + A (sI - A)^-1 folds the input-rate channel into b, d
    return StateSpaceModel(a=A, b=Bu + A @ Bdu, c=C, d=Du + C @ Bdu, e=Ddu,
                           state_labels=labels, meta=meta)


def linearize(vsc: VscParams, grid: GridParams, command: DispatchCommand,
              op: OperatingPoint, tol=1e-6, kpv_scale=1.0):
    """Linear model of the unit at an equilibrium operating point."""
    x, bias, _, _ = equilibrium_state(vsc, grid, op)
    p_ref, q_ref = command.physical(vsc)
    p = pack_params(vsc, grid, p_ref, q_ref, kpv_scale=kpv_scale)
    u = np.array([op.u_d, op.u_q])
    r = residual_pu(vsc, grid, p, x, u)
    if r > tol:
        raise NotAtEquilibrium(f"{vsc.id}: operating point residual {r:.3e} p.u. exceeds {tol:g}")
    return _model_from_jacobians(jacobians(vsc, grid, p, x, u), state_labels(vsc),
                                 {"unit": vsc.id, "op": op})


def model_at(vsc: VscParams, grid: GridParams, op: OperatingPoint, kpv_scale=1.0):
    """Linear model at an arbitrary terminal operating point.

    References and a q-axis voltage reference offset are chosen so that ``op``
    is an equilibrium; constants do not enter the Jacobians, so the result is
    the admittance the unit would show if driven to that point.
    """
    x, bias, p_ref, q_ref = equilibrium_state(vsc, grid, op)
    p = pack_params(vsc, grid, p_ref, q_ref, bias=bias, kpv_scale=kpv_scale)
    u = np.array([op.u_d, op.u_q])
    return _model_from_jacobians(jacobians(vsc, grid, p, x, u), state_labels(vsc),
                                 {"unit": vsc.id, "op": op})


def admittance_matrices(model: StateSpaceModel, freqs):
    """``(nf, 2, 2)`` complex admittance over an array of frequencies (Hz)."""
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    if np.any(freqs <= 0):
        raise ValueError("frequencies must be positive")
    s = 2j * np.pi * freqs
    n = model.n_states
    eye = np.eye(n)
    m = s[:, None, None] * eye - model.a[None]
    # a pole on the evaluation axis makes the resolvent singular
    poles = model.poles()
    gap = np.min(np.abs(s[:, None] - poles[None, :]), axis=1)
    bad = gap < 1e-9 * np.maximum(np.abs(s), 1.0)
    if np.any(bad):
        raise SingularResolvent(f"j2pi f coincides with a pole near f = {freqs[bad][0]:g} Hz")
    x = np.linalg.solve(m, np.broadcast_to(model.b.astype(complex), (len(s), n, 2)))
    return model.c[None] @ x + model.d[None] + s[:, None, None] * model.e[None]


def admittance(model: StateSpaceModel, f: float) -> Admittance2x2:
    return Admittance2x2.from_matrix(admittance_matrices(model, [f])[0], f)


def grid_impedance_matrices(grid: GridParams, freqs):
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    w = 2 * np.pi * freqs
    z = np.empty((len(freqs), 2, 2), dtype=complex)
    diag = grid.r_g + 1j * w * grid.l_g
    z[:, 0, 0] = diag
    z[:, 1, 1] = diag
    z[:, 0, 1] = -grid.omega_n * grid.l_g
    z[:, 1, 0] = grid.omega_n * grid.l_g
    return z


def grid_impedance(grid: GridParams, f: float):
    """Series RL impedance of the grid branch in the dq frame."""
    return grid_impedance_matrices(grid, [f])[0]


def rotation(phi):
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, -s], [s, c]])


def rotate(y, phi):
    """Express a dq matrix in a frame rotated by ``-phi``: ``R(phi) Y R(-phi)``."""
    r = rotation(phi)
    return r @ y @ r.T
