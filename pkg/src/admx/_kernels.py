"""Compiled averaged-model kernels shared by the simulator and the linearizer.

Every unit lives in its own dq frame rotating at ``omega_n + dw`` and offset by
``delta`` from the common frame (which rotates at ``omega_n`` and is aligned
with the infinite bus).  Network quantities live in the common frame.

Unit state layout (LC):  delta, dw, e_v, xi_d, xi_q, if_d, if_q
Unit state layout (LCL): ... as LC ..., uc_d, uc_q, i2_d, i2_q
Network states:          upcc_d, upcc_q, ig_d, ig_q
"""
import numpy as np
from numba import njit

# parameter vector layout (one row per unit)
P_LF, P_LF2, P_CF, P_J, P_DP, P_DQ, P_KQ = 0, 1, 2, 3, 4, 5, 6
P_KPV, P_KIV, P_KPI, P_RV, P_LV, P_RF, P_RF2 = 7, 8, 9, 10, 11, 12, 13
P_PREF, P_QREF, P_LCL, P_UNOM, P_WN, P_BD, P_BQ = 14, 15, 16, 17, 18, 19, 20
P_DEC = 21  # 1.0 enables the current loop cross decoupling
P_FF = 22  # terminal voltage feedforward gain of the current loop
P_IFF = 23  # output current feedforward gain of the voltage loop
N_PARAM = 24

N_LC = 7
N_LCL = 11

# aux output layout of unit_rhs
A_ICD, A_ICQ, A_NODED, A_NODEQ, A_P, A_Q = 0, 1, 2, 3, 4, 5
A_UD, A_UQ, A_ID, A_IQ = 6, 7, 8, 9
N_AUX = 10

# grid vector layout
G_LG, G_RG, G_UG, G_WN, G_CTOT = 0, 1, 2, 3, 4

# logged signals per unit, then network
UNIT_SIGNALS = ("delta", "omega", "p", "q", "ud", "uq", "id", "iq", "icd", "icq")
NET_SIGNALS = ("upcc_d", "upcc_q", "ig_d", "ig_q")
N_USIG = len(UNIT_SIGNALS)

POWER_FACTOR = 1.5  # amplitude-invariant Park: P = 1.5 (ud id + uq iq)


@njit(cache=True)
def unit_rhs(p, x, ud, uq, dud, duq, dkpi, dx, aux):
    """Averaged dynamics of one grid-forming unit.

    ``(ud, uq)`` is the terminal (PCC) voltage and ``(dud, duq)`` its time
    derivative, both in the common frame.  ``dkpi`` is the additive current
    loop gain modulation.  Derivatives are written into ``dx`` and terminal
    quantities into ``aux``.
    """
    wn = p[P_WN]
    delta = x[0]
    dw = x[1]
    ev = x[2]
    xid = x[3]
    xiq = x[4]
    ifd = x[5]
    ifq = x[6]
    w = wn + dw
    c = np.cos(delta)
    s = np.sin(delta)
    # terminal voltage in the unit frame
    uld = c * ud + s * uq
    ulq = -s * ud + c * uq
    cf = p[P_CF]
    lcl = p[P_LCL] > 0.5
    if lcl:
        ucd = x[7]
        ucq = x[8]
        iod = x[9]
        ioq = x[10]
    else:
        ucd = uld
        ucq = ulq
        # capacitor current is frame independent: C (du/dt + j wn u)
        icapd_c = cf * (dud - wn * uq)
        icapq_c = cf * (duq + wn * ud)
        iod = ifd - (c * icapd_c + s * icapq_c)
        ioq = ifq - (-s * icapd_c + c * icapq_c)

    pe = POWER_FACTOR * (uld * iod + ulq * ioq)
    qe = POWER_FACTOR * (ulq * iod - uld * ioq)
    umag = np.sqrt(uld * uld + ulq * ulq)

    # power loops
    dx[0] = dw
    dx[1] = (p[P_PREF] - pe - p[P_DP] * dw) / (p[P_J] * wn)
    dx[2] = (p[P_QREF] - qe + p[P_DQ] * (p[P_UNOM] - umag)) / p[P_KQ]

    # virtual impedance reference (static reactance at wn)
    xv = wn * p[P_LV]
    urd = ev + p[P_BD] - p[P_RV] * iod + xv * ioq
    urq = p[P_BQ] - p[P_RV] * ioq - xv * iod
    ed = urd - ucd
    eq = urq - ucq
    dx[3] = p[P_KIV] * ed
    dx[4] = p[P_KIV] * eq
    ird = p[P_KPV] * ed + xid + p[P_IFF] * iod - w * cf * ucq
    irq = p[P_KPV] * eq + xiq + p[P_IFF] * ioq + w * cf * ucd

    # P current loop with cross decoupling, no terminal feedforward
    kpi = p[P_KPI] + dkpi
    lf = p[P_LF]
    dec = p[P_DEC] * w * lf
    vd = kpi * (ird - ifd) - dec * ifq + p[P_FF] * ucd
    vq = kpi * (irq - ifq) + dec * ifd + p[P_FF] * ucq
    dx[5] = (vd - ucd - p[P_RF] * ifd + w * lf * ifq) / lf
    dx[6] = (vq - ucq - p[P_RF] * ifq - w * lf * ifd) / lf

    if lcl:
        lf2 = p[P_LF2]
        dx[7] = (ifd - iod) / cf + w * ucq
        dx[8] = (ifq - ioq) / cf - w * ucd
        dx[9] = (ucd - uld - p[P_RF2] * iod) / lf2 + w * ioq
        dx[10] = (ucq - ulq - p[P_RF2] * ioq) / lf2 - w * iod
        nd = iod
        nq = ioq
    else:
        nd = ifd
        nq = ifq

    aux[A_ICD] = c * iod - s * ioq
    aux[A_ICQ] = s * iod + c * ioq
    aux[A_NODED] = c * nd - s * nq
    aux[A_NODEQ] = s * nd + c * nq
    aux[A_P] = pe
    aux[A_Q] = qe
    aux[A_UD] = uld
    aux[A_UQ] = ulq
    aux[A_ID] = iod
    aux[A_IQ] = ioq


@njit(cache=True)
def _command_at(t, ramp):
    # ramp = (t_start, t_end, p_from, p_to, q_from, q_to)
    if t <= ramp[0]:
        return ramp[2], ramp[4]
    if t >= ramp[1]:
        return ramp[3], ramp[5]
    a = (t - ramp[0]) / (ramp[1] - ramp[0])
    return ramp[2] + a * (ramp[3] - ramp[2]), ramp[4] + a * (ramp[5] - ramp[4])


@njit(cache=True)
def system_rhs(t, x, params, offsets, grid, ramps, mod, dx, aux):
    """Full microgrid right-hand side; ``aux`` is (n_units, N_AUX)."""
    n = params.shape[0]
    nx = x.shape[0]
    wn = grid[G_WN]
    ud = x[nx - 4]
    uq = x[nx - 3]
    igd = x[nx - 2]
    igq = x[nx - 1]
    # node injections depend on states only, so the PCC derivative is explicit
    injd = 0.0
    injq = 0.0
    for k in range(n):
        o = offsets[k]
        c = np.cos(x[o])
        s = np.sin(x[o])
        if params[k, P_LCL] > 0.5:
            ad = x[o + 9]
            aq = x[o + 10]
        else:
            ad = x[o + 5]
            aq = x[o + 6]
        injd += c * ad - s * aq
        injq += s * ad + c * aq
    ctot = grid[G_CTOT]
    dud = (injd - igd) / ctot + wn * uq
    duq = (injq - igq) / ctot - wn * ud
    pk = np.empty(N_PARAM)
    for k in range(n):
        o = offsets[k]
        for j in range(N_PARAM):
            pk[j] = params[k, j]
        pr, qr = _command_at(t, ramps[k])
        pk[P_PREF] = pr
        pk[P_QREF] = qr
        dkpi = 0.0
        if int(mod[0]) == k:
            dkpi = mod[1] * np.sin(2.0 * np.pi * mod[2] * (t - mod[3]))
        unit_rhs(pk, x[o:offsets[k + 1]], ud, uq, dud, duq, dkpi,
                 dx[o:offsets[k + 1]], aux[k])
    dx[nx - 4] = dud
    dx[nx - 3] = duq
    lg = grid[G_LG]
    rg = grid[G_RG]
    dx[nx - 2] = (ud - grid[G_UG] - rg * igd) / lg + wn * igq
    dx[nx - 1] = (uq - rg * igq) / lg - wn * igd


@njit(cache=True)
def _log_row(x, aux, params, offsets, out):
    n = params.shape[0]
    nx = x.shape[0]
    for k in range(n):
        b = k * N_USIG
        o = offsets[k]
        out[b + 0] = x[o]
        out[b + 1] = params[k, P_WN] + x[o + 1]
        out[b + 2] = aux[k, A_P]
        out[b + 3] = aux[k, A_Q]
        out[b + 4] = aux[k, A_UD]
        out[b + 5] = aux[k, A_UQ]
        out[b + 6] = aux[k, A_ID]
        out[b + 7] = aux[k, A_IQ]
        out[b + 8] = aux[k, A_ICD]
        out[b + 9] = aux[k, A_ICQ]
    b = n * N_USIG
    for j in range(4):
        out[b + j] = x[nx - 4 + j]


@njit(cache=True)
def integrate(x0, t0, dt, n_steps, params, offsets, grid, ramps, mod,
              scale, decim, log):
    """Fixed-step RK4.  Returns (x_final, rows_logged, diverged)."""
    nx = x0.shape[0]
    n = params.shape[0]
    x = x0.copy()
    k1 = np.empty(nx)
    k2 = np.empty(nx)
    k3 = np.empty(nx)
    k4 = np.empty(nx)
    xt = np.empty(nx)
    aux = np.empty((n, N_AUX))
    row = 0
    t = t0
    # row 0 is the initial condition
    system_rhs(t, x, params, offsets, grid, ramps, mod, k1, aux)
    _log_row(x, aux, params, offsets, log[row])
    row += 1
    for step in range(n_steps):
        system_rhs(t, x, params, offsets, grid, ramps, mod, k1, aux)
        for i in range(nx):
            xt[i] = x[i] + 0.5 * dt * k1[i]
        system_rhs(t + 0.5 * dt, xt, params, offsets, grid, ramps, mod, k2, aux)
        for i in range(nx):
            xt[i] = x[i] + 0.5 * dt * k2[i]
        system_rhs(t + 0.5 * dt, xt, params, offsets, grid, ramps, mod, k3, aux)
        for i in range(nx):
            xt[i] = x[i] + dt * k3[i]
        system_rhs(t + dt, xt, params, offsets, grid, ramps, mod, k4, aux)
        bad = False
        for i in range(nx):
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            v = x[i] / scale[i]
            if not (abs(v) < 1e6):
                bad = True
        t = t0 + (step + 1) * dt
        if bad:
            return x, row, True
        if (step + 1) % decim == 0 and row < log.shape[0]:
            system_rhs(t, x, params, offsets, grid, ramps, mod, k1, aux)
            _log_row(x, aux, params, offsets, log[row])
            row += 1
    return x, row, False
