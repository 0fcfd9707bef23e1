"""Generalized Nyquist evaluation of the PCC minor loop ``Zg * sum(Y_i)``."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .analytic import grid_impedance_matrices, rotate

log = logging.getLogger(__name__)

SSO_BAND = (2.0, 130.0)
SSO_POINTS = 400


def sso_band(n=SSO_POINTS, lo=SSO_BAND[0], hi=SSO_BAND[1]):
    return np.geomspace(lo, hi, n)


@dataclass
class EigenLoci:
    freqs: np.ndarray
    tracks: np.ndarray  # (2, nf) complex
    winding: np.ndarray  # (2,) clockwise encirclements of -1
    arg_change: np.ndarray  # (2,) accumulated arg(lambda + 1) over the band

    def __post_init__(self):
        if np.any(np.diff(self.freqs) <= 0):
            raise ValueError("frequency grid must be strictly increasing")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["f", "re_l1", "im_l1", "re_l2", "im_l2"])
            for k, f in enumerate(self.freqs):
                l1, l2 = self.tracks[:, k]
                w.writerow([repr(float(f)), repr(l1.real), repr(l1.imag), repr(l2.real), repr(l2.imag)])


@dataclass
class SmiResult:
    s_k: int
    d_k: float
    m_k: float
    f_crit: float
    loci: EigenLoci = None
    state: object = None


def loop_gain(admittances, z_g, f=None):
    """``Zg @ sum(Y)``.  Accepts :class:`Admittance2x2` objects or 2x2 arrays."""
    mats = []
    freqs = set()
    for y in admittances:
        if hasattr(y, "matrix"):
            mats.append(y.matrix)
            freqs.add(round(y.f, 12))
        else:
            mats.append(np.asarray(y, dtype=complex))
    if f is not None:
        freqs.add(round(f, 12))
    if len(freqs) > 1:
        raise ValueError(f"admittances given at different frequencies: {sorted(freqs)}")
    total = np.sum(mats, axis=0) if mats else np.zeros((2, 2), complex)
    return np.asarray(z_g, dtype=complex) @ total


def eig2(m):
    """Eigenvalues of a stack of 2x2 matrices, closed form, shape (..., 2)."""
    a, b, c, d = m[..., 0, 0], m[..., 0, 1], m[..., 1, 0], m[..., 1, 1]
    tr = a + d
    disc = np.sqrt((a - d) ** 2 + 4 * b * c + 0j)
    return np.stack([(tr + disc) / 2, (tr - disc) / 2], axis=-1)


def match_tracks(lams):
    """Order eigenvalue pairs so consecutive points are nearest neighbours."""
    out = lams.copy()
    for k in range(1, len(out)):
        prev = out[k - 1]
        cur = out[k]
        keep = abs(cur[0] - prev[0]) + abs(cur[1] - prev[1])
        swap = abs(cur[1] - prev[0]) + abs(cur[0] - prev[1])
        # ties keep the previous ordering
        if swap < keep - 1e-9:
            out[k] = cur[::-1]
    return out


def _closure(w):
    """Arg change along the straight segment from conj(w) to w."""
    a = np.angle(w)
    if w.real >= 0:
        return 2 * a
    return 2 * a - 2 * np.pi * np.sign(a) if a != 0 else 0.0


def winding_numbers(freqs, tracks):
    """Clockwise encirclements of -1, closing the band by conjugate symmetry."""
    wind = np.zeros(2, dtype=int)
    dargs = np.zeros(2)
    for j in range(2):
        w = tracks[j] + 1.0
        if np.any(w == 0):
            # locus through the critical point: marginal, no defined winding
            dargs[j] = np.nan
            continue
        steps = np.angle(w[1:] / w[:-1])
        band = steps.sum()
        # mirror half traverses the conjugate locus backwards: same change
        total = 2 * band + _closure(w[0]) - _closure(w[-1])
        dargs[j] = band
        wind[j] = -int(np.round(total / (2 * np.pi)))
        for end in (w[0], w[-1]):
            if abs(np.angle(end)) > np.pi / 4:
                log.debug("locus end far from the positive real axis (arg %.2f rad)", np.angle(end))
    return wind, dargs


def loci_from_loop(freqs, lmat):
    freqs = np.asarray(freqs, dtype=float)
    lams = match_tracks(eig2(lmat))
    tracks = lams.T.copy()
    wind, dargs = winding_numbers(freqs, tracks)
    return EigenLoci(freqs, tracks, wind, dargs)


def system_admittance(y_source, state, freqs):
    """Sum of unit admittances rotated into the PCC voltage frame."""
    total = np.zeros((len(freqs), 2, 2), dtype=complex)
    for uid, op in zip(state.ids, state.ops):
        y = y_source(uid, op, freqs)
        total += rotate(y, -op.angle)
    return total


def trace_loci(y_source, state, band=None, grid=None):
    """Eigenloci of the minor loop over ``band``.

    ``y_source(uid, op, freqs)`` returns unit-frame admittances ``(nf, 2, 2)``.
    """
    freqs = sso_band() if band is None else np.asarray(band, dtype=float)
    env = getattr(y_source, "envelope", None)
    if env is not None and (freqs[0] < env[0] or freqs[-1] > env[1]):
        raise ValueError(f"band [{freqs[0]}, {freqs[-1]}] Hz outside source envelope {env}")
    grid = grid if grid is not None else y_source.grid
    lmat = grid_impedance_matrices(grid, freqs) @ system_admittance(y_source, state, freqs)
    return loci_from_loop(freqs, lmat)


def smi(loci: EigenLoci) -> SmiResult:
    dist = np.abs(loci.tracks + 1.0)
    j, k = np.unravel_index(np.argmin(dist), dist.shape)
    d = float(dist[j, k])
    s = -1 if np.any(loci.winding != 0) else 1
    return SmiResult(s, d, s * d, float(loci.freqs[k]), loci)
