"""Rational-quadratic admittance surrogate with transfer learning.

Each admittance entry is a ratio of quadratic forms of the lifted
operating point ``x``.  The quadratic-form matrices depend on frequency
only, generated from a small tanh network of ``log10(f)``::

    Y_c = x' P_c(f) x / (1 + (x' P_0(f) x)^2)
    P_c(f) = sum_r a_{c,r}(f) v_{c,r} v_{c,r}'

Channels are the real and imaginary parts of ``dd, dq, qd, qq`` plus the
shared denominator.  Everything is per-unit: operating points on the unit's
rating and admittances multiplied by its base impedance.  Targets are
scaled per channel to unit RMS over the pretraining set.
"""
from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .analytic import Admittance2x2, OperatingPoint, admittance_matrices, model_at
from .config import GridParams, VscParams, per_unit_base

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
N_FEAT = 15
N_OUT = 8  # re/im of dd, dq, qd, qq
N_CH = N_OUT + 1
F_ENVELOPE = (1.0, 150.0)
LAYER_OF = {"enc": "II", "heads": "III", "coef": "IV"}

# op grid of the pretraining set (per-unit)
SOURCE_GRID = {"u_d": (0.8, 1.2, 0.1), "u_q": (-0.2, 0.2, 0.1), "i_d": (-1.0, 1.0, 0.1),
               "i_q": (-1.0, 1.0, 0.1)}


class ModelCorrupt(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, report):
        super().__init__(msg)
        self.report = report


def lift_features(op) -> np.ndarray:
    """``[1, Ud, Uq, Id, Iq]`` followed by their upper-triangular products."""
    x = np.asarray(op.as_array() if hasattr(op, "as_array") else op, dtype=float)
    return lift_batch(x[None, :])[0]


def lift_batch(ops) -> np.ndarray:
    ops = np.asarray(ops, dtype=float).reshape(-1, 4)
    iu = np.triu_indices(4)
    quad = (ops[:, :, None] * ops[:, None, :])[:, iu[0], iu[1]]
    return np.hstack([np.ones((len(ops), 1)), ops, quad])


@dataclass(frozen=True)
class Architecture:
    enc_width: int = 64
    latent: int = 48
    heads: int = 3
    head_width: int = 16
    rank: int = 4

    def shapes(self):
        """Ordered ``(name, shape, layer)`` of every parameter block."""
        g = self.heads * self.head_width
        out = [("W1", (1, self.enc_width), "enc"), ("b1", (self.enc_width,), "enc"),
               ("W2", (self.enc_width, self.enc_width), "enc"), ("b2", (self.enc_width,), "enc"),
               ("W3", (self.enc_width, self.latent), "enc"), ("b3", (self.latent,), "enc")]
        for h in range(self.heads):
            out += [(f"H{h}", (self.latent, self.head_width), "heads"),
                    (f"h{h}", (self.head_width,), "heads")]
        out += [("Wa", (g, N_CH * self.rank), "coef"), ("ba", (N_CH * self.rank,), "coef"),
                ("V", (N_CH, self.rank, N_FEAT), "coef")]
        return out

    @property
    def n_params(self):
        return sum(int(np.prod(s)) for _, s, _ in self.shapes())


@dataclass
class SurrogateModel:
    arch: Architecture
    theta: np.ndarray
    phi_stats: tuple = (np.log10(12.25), 0.62)  # log10 f mean/std
    y_scale: np.ndarray = field(default_factory=lambda: np.ones(N_OUT))
    op_lo: np.ndarray = field(default_factory=lambda: np.full(4, -np.inf))
    op_hi: np.ndarray = field(default_factory=lambda: np.full(4, np.inf))
    freeze: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (self.arch.n_params,):
            raise ValueError(f"expected {self.arch.n_params} parameters, got {self.theta.shape}")
        if self.freeze is None:
            self.freeze = np.zeros(self.arch.n_params, dtype=bool)
        self.freeze = np.asarray(self.freeze, dtype=bool)
        if self.freeze.shape != self.theta.shape:
            raise ValueError("freeze mask must match the parameter vector")
        self.y_scale = np.asarray(self.y_scale, dtype=float)

    def copy(self):
        return SurrogateModel(self.arch, self.theta.copy(), tuple(self.phi_stats), self.y_scale.copy(),
                              np.array(self.op_lo), np.array(self.op_hi), self.freeze.copy(),
                              json.loads(json.dumps(self.meta)))

    def views(self, theta=None):
        theta = self.theta if theta is None else theta
        out, i = {}, 0
        for name, shape, _ in self.arch.shapes():
            n = int(np.prod(shape))
            out[name] = theta[i:i + n].reshape(shape)
            i += n
        return out

    def layer_mask(self, *layers):
        """Boolean mask over ``theta`` selecting the given blocks ("enc", "heads", "coef")."""
        m = np.zeros(self.arch.n_params, dtype=bool)
        i = 0
        for _, shape, layer in self.arch.shapes():
            n = int(np.prod(shape))
            m[i:i + n] = layer in layers
            i += n
        return m

    def check(self):
        if not np.all(np.isfinite(self.theta)):
            raise ModelCorrupt("model parameters contain NaN or Inf")

    # -- forward -------------------------------------------------------
    def _phi(self, f):
        return ((np.log10(np.asarray(f, dtype=float)) - self.phi_stats[0]) / self.phi_stats[1])[:, None]

    def _forward(self, x, phi, theta=None, drop_mask=None):
        p = self.views(theta)
        c = {"x": x}
        c["h1"] = np.tanh(phi @ p["W1"] + p["b1"])
        c["h2"] = np.tanh(c["h1"] @ p["W2"] + p["b2"])
        z = c["h2"] @ p["W3"] + p["b3"]
        if drop_mask is not None:
            z = z * drop_mask
        c["z"] = z
        c["g"] = [np.tanh(z @ p[f"H{h}"] + p[f"h{h}"]) for h in range(self.arch.heads)]
        g = np.hstack(c["g"])
        c["gc"] = g
        a = (g @ p["Wa"] + p["ba"]).reshape(-1, N_CH, self.arch.rank)
        proj = np.einsum("bi,cri->bcr", x, p["V"])
        s = proj * proj
        n = np.sum(a * s, axis=2)
        q = n[:, N_OUT]
        den = 1.0 + q * q
        c.update(a=a, proj=proj, s=s, n=n, q=q, den=den)
        return n[:, :N_OUT] / den[:, None], c

    def predict_normalized(self, ops, freqs):
        self.check()
        return self._forward(lift_batch(ops), self._phi(np.atleast_1d(freqs)))[0]

    def predict(self, ops, freqs, warn=True) -> np.ndarray:
        """``(N, 2, 2)`` per-unit admittance at per-unit ops and frequencies (Hz)."""
        ops = np.asarray(ops, dtype=float).reshape(-1, 4)
        freqs = np.broadcast_to(np.asarray(freqs, dtype=float), (len(ops),))
        if warn:
            self._envelope_warnings(ops, freqs)
        y = self.predict_normalized(ops, freqs) * self.y_scale
        return (y[:, 0::2] + 1j * y[:, 1::2]).reshape(-1, 2, 2)

    def _envelope_warnings(self, ops, freqs):
        if np.any(freqs < F_ENVELOPE[0]) or np.any(freqs > F_ENVELOPE[1]):
            warnings.warn(f"frequency outside the training envelope {F_ENVELOPE} Hz", stacklevel=3)
        span = self.op_hi - self.op_lo
        if np.all(np.isfinite(span)):
            lo, hi = self.op_lo - 0.2 * span, self.op_hi + 0.2 * span
            if np.any(ops < lo) or np.any(ops > hi):
                warnings.warn("operating point outside the training hull (+/-20%)", stacklevel=3)

    # -- loss and gradient --------------------------------------------
    def loss_grad(self, x, phi, t, theta=None, drop_mask=None):
        """Mean squared Frobenius error and its exact gradient w.r.t. ``theta``."""
        theta = self.theta if theta is None else theta
        p = self.views(theta)
        yhat, c = self._forward(x, phi, theta, drop_mask)
        b = len(x)
        r = yhat - t
        loss = float(np.sum(r * r) / b)
        grad = np.zeros_like(theta)
        gv = self.views(grad)

        dy = 2.0 * r / b
        den, n = c["den"], c["n"]
        dn = np.empty_like(n)
        dn[:, :N_OUT] = dy / den[:, None]
        dden = -np.sum(dy * n[:, :N_OUT], axis=1) / den ** 2
        dn[:, N_OUT] = dden * 2.0 * c["q"]
        da = dn[:, :, None] * c["s"]
        dproj = dn[:, :, None] * c["a"] * 2.0 * c["proj"]
        gv["V"][...] = np.einsum("bcr,bi->cri", dproj, x)
        da = da.reshape(b, -1)
        gv["Wa"][...] = c["gc"].T @ da
        gv["ba"][...] = da.sum(0)
        dg = da @ p["Wa"].T
        hw = self.arch.head_width
        dz = np.zeros_like(c["z"])
        for h in range(self.arch.heads):
            gh = c["g"][h]
            dpre = dg[:, h * hw:(h + 1) * hw] * (1.0 - gh * gh)
            gv[f"H{h}"][...] = c["z"].T @ dpre
            gv[f"h{h}"][...] = dpre.sum(0)
            dz += dpre @ p[f"H{h}"].T
        if drop_mask is not None:
            dz = dz * drop_mask
        gv["W3"][...] = c["h2"].T @ dz
        gv["b3"][...] = dz.sum(0)
        dpre2 = (dz @ p["W3"].T) * (1.0 - c["h2"] ** 2)
        gv["W2"][...] = c["h1"].T @ dpre2
        gv["b2"][...] = dpre2.sum(0)
        dpre1 = (dpre2 @ p["W2"].T) * (1.0 - c["h1"] ** 2)
        gv["W1"][...] = phi.T @ dpre1
        gv["b1"][...] = dpre1.sum(0)
        return loss, grad

    # -- persistence ----------------------------------------------------
    def to_dict(self):
        a = self.arch
        return {"schema_version": SCHEMA_VERSION,
                "architecture": {"enc_width": a.enc_width, "latent": a.latent, "heads": a.heads,
                                 "head_width": a.head_width, "rank": a.rank, "n_features": N_FEAT,
                                 "n_channels": N_CH},
                "normalization": {"phi_mean": float(self.phi_stats[0]),
                                  "phi_std": float(self.phi_stats[1]),
                                  "y_scale": self.y_scale.tolist(), "op_lo": list(map(float, self.op_lo)),
                                  "op_hi": list(map(float, self.op_hi))},
                "params": self.theta.tolist(),
                "freeze_mask": self.freeze.astype(int).tolist(),
                "meta": self.meta}

    def save(self, path):
        self.check()
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_dict(cls, d):
        ver = d.get("schema_version")
        if ver is None or ver > SCHEMA_VERSION:
            raise ValueError(f"unsupported model schema_version {ver!r}")
        ad = d["architecture"]
        arch = Architecture(ad["enc_width"], ad["latent"], ad["heads"], ad["head_width"], ad["rank"])
        nm = d["normalization"]
        m = cls(arch, np.array(d["params"], dtype=float), (nm["phi_mean"], nm["phi_std"]),
                np.array(nm["y_scale"]), np.array(nm["op_lo"], dtype=float),
                np.array(nm["op_hi"], dtype=float), np.array(d["freeze_mask"], dtype=bool),
                d.get("meta", {}))
        m.check()
        return m

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def init_model(arch: Architecture = None, seed=0) -> SurrogateModel:
    """Glorot-uniform weights, zero biases, unit-norm-ish factor vectors."""
    arch = arch or Architecture()
    rng = np.random.default_rng(seed)
    m = SurrogateModel(arch, np.zeros(arch.n_params))
    v = m.views()
    for name, shape, _ in arch.shapes():
        if name == "V":
            v[name][...] = rng.normal(0.0, 1.0 / np.sqrt(N_FEAT), shape)
        elif len(shape) == 2:
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            v[name][...] = rng.uniform(-lim, lim, shape)
    # small coefficients keep the initial ratio close to the numerator
    v["Wa"] *= 0.1
    return m


def forward(model: SurrogateModel, op, f: float) -> Admittance2x2:
    x = op.as_array() if hasattr(op, "as_array") else np.asarray(op, float)
    return Admittance2x2.from_matrix(model.predict(x[None, :], [f])[0], f)


def _targets(y):
    y = np.asarray(y, dtype=complex).reshape(-1, 4)
    out = np.empty((len(y), N_OUT))
    out[:, 0::2] = y.real
    out[:, 1::2] = y.imag
    return out


def _arrays(dataset):
    ops, f, y = dataset.arrays()
    if len(ops) == 0:
        raise ValueError("dataset is empty")
    return ops, f, _targets(y)


def loss(model: SurrogateModel, dataset) -> float:
    """Mean squared Frobenius error over samples, real/imag, normalized units."""
    ops, f, t = _arrays(dataset)
    yhat = model.predict_normalized(ops, f)
    return float(np.mean(np.sum((yhat - t / model.y_scale) ** 2, axis=1)))


def gradient_check(model: SurrogateModel, dataset, n=5, h=1e-4, seed=0, idx=None):
    """Max relative error between backprop and central differences.

    Relative error is ``|g_bp - g_fd| / max(|g_bp|, |g_fd|, floor)`` with the
    floor at 1e-6 of the largest gradient entry, so entries that are exactly
    zero by structure do not divide by zero.
    """
    ops, f, t = _arrays(dataset)
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(ops), size=min(n, len(ops)), replace=False)
    x, phi, tt = lift_batch(ops[pick]), model._phi(f[pick]), t[pick] / model.y_scale
    _, g = model.loss_grad(x, phi, tt)
    idx = np.arange(model.arch.n_params) if idx is None else np.asarray(idx)
    fd = np.empty(len(idx))
    th = model.theta.copy()
    for j, k in enumerate(idx):
        old = th[k]
        th[k] = old + h
        lp, _ = model.loss_grad(x, phi, tt, th)
        th[k] = old - h
        lm, _ = model.loss_grad(x, phi, tt, th)
        th[k] = old
        fd[j] = (lp - lm) / (2 * h)
    gb = g[idx]
    floor = 1e-6 * max(np.max(np.abs(gb)), 1e-30)
    rel = np.abs(gb - fd) / np.maximum(np.maximum(np.abs(gb), np.abs(fd)), floor)
    return float(rel.max())


@dataclass
class Hyper:
    epochs: int = 400
    batch: int = 64
    lr: float = 1e-3
    dropout: float = 0.1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.2
    freeze_mask: np.ndarray = None
    lr_decay: float = 0.1  # final lr as a fraction of the initial one (cosine)
    tol: float = 1e-14  # stop once the validation loss is below this


@dataclass
class TrainReport:
    train_loss: list
    val_loss: list
    final: tuple
    hyper: dict
    wall_time: float
    best_epoch: int

    def to_dict(self):
        return {"train_loss": self.train_loss, "val_loss": self.val_loss, "final": list(self.final),
                "hyper": self.hyper, "wall_time": self.wall_time, "best_epoch": self.best_epoch}


def split_indices(n, seed, val_fraction=0.2):
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(val_fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def fit_normalization(model: SurrogateModel, dataset):
    """Set target scales, frequency standardization and the op hull from ``dataset``."""
    ops, f, t = _arrays(dataset)
    scale = np.sqrt(np.mean(t * t, axis=0))
    model.y_scale = np.where(scale > 0, scale, 1.0)
    lf = np.log10(f)
    model.phi_stats = (float(lf.mean()), float(max(lf.std(), 1e-3)))
    model.op_lo, model.op_hi = ops.min(0), ops.max(0)
    return model


def train(model: SurrogateModel, dataset, hyper: Hyper = None):
    """Adam on the normalized MSE; keeps the parameters of the best validation epoch."""
    hyper = hyper or Hyper()
    model = model.copy()
    model.check()
    ops, f, t = _arrays(dataset)
    x_all, phi_all, t_all = lift_batch(ops), model._phi(f), t / model.y_scale
    tr, va = split_indices(len(ops), hyper.seed, hyper.val_fraction)
    if len(va) == 0:
        va = tr
    frozen = model.freeze if hyper.freeze_mask is None else np.asarray(hyper.freeze_mask, bool)
    if frozen.shape != model.theta.shape:
        raise ValueError("freeze mask must match the parameter vector")
    live = ~frozen
    rng = np.random.default_rng(hyper.seed + 1)
    m1 = np.zeros_like(model.theta)
    m2 = np.zeros_like(model.theta)
    step = 0
    hist_tr, hist_va = [], []
    t0 = time.perf_counter()

    def val_loss(theta):
        yh, _ = model._forward(x_all[va], phi_all[va], theta)
        return float(np.mean(np.sum((yh - t_all[va]) ** 2, axis=1)))

    # the starting point competes too, so training never returns something worse
    best = (val_loss(model.theta), model.theta.copy(), -1)

    def train_loss(theta):
        yh, _ = model._forward(x_all[tr], phi_all[tr], theta)
        return float(np.mean(np.sum((yh - t_all[tr]) ** 2, axis=1)))

    for ep in range(hyper.epochs):
        vl = val_loss(model.theta)
        if vl <= hyper.tol:
            # Adam rescales round-off gradients to full-size steps, so an exact
            # optimum is left alone rather than perturbed
            log.info("converged before epoch %d (validation loss %.3g)", ep, vl)
            hist_tr.append(train_loss(model.theta))
            hist_va.append(vl)
            if vl < best[0]:
                best = (vl, model.theta.copy(), ep)
            break
        frac = ep / max(hyper.epochs - 1, 1)
        lr = hyper.lr * (hyper.lr_decay + (1 - hyper.lr_decay) * 0.5 * (1 + np.cos(np.pi * frac)))
        order = rng.permutation(tr)
        tot = 0.0
        for s in range(0, len(order), hyper.batch):
            bi = order[s:s + hyper.batch]
            mask = None
            if hyper.dropout > 0:
                keep = 1.0 - hyper.dropout
                mask = (rng.random((len(bi), model.arch.latent)) < keep) / keep
            lb, g = model.loss_grad(x_all[bi], phi_all[bi], t_all[bi], drop_mask=mask)
            tot += lb * len(bi)
            if not np.isfinite(lb) or lb > 1e6:
                rep = TrainReport(hist_tr, hist_va, (np.nan, np.nan), _hyper_dict(hyper),
                                  time.perf_counter() - t0, best[2])
                raise TrainingDiverged(f"loss diverged at epoch {ep} ({lb:.3g})", rep)
            g = np.where(live, g, 0.0)
            step += 1
            m1 = hyper.beta1 * m1 + (1 - hyper.beta1) * g
            m2 = hyper.beta2 * m2 + (1 - hyper.beta2) * g * g
            mh = m1 / (1 - hyper.beta1 ** step)
            vh = m2 / (1 - hyper.beta2 ** step)
            model.theta = model.theta - np.where(live, lr * mh / (np.sqrt(vh) + hyper.eps), 0.0)
        hist_tr.append(tot / len(tr))
        vl = val_loss(model.theta)
        hist_va.append(vl)
        if vl < best[0]:
            best = (vl, model.theta.copy(), ep)
    model.theta = best[1]
    final_tr = train_loss(model.theta)
    report = TrainReport(hist_tr, hist_va, (final_tr, best[0]), _hyper_dict(hyper),
                         time.perf_counter() - t0, best[2])
    model.meta = dict(model.meta, trained_on=getattr(dataset, "fingerprint", ""), seed=hyper.seed,
                      final_mse=[final_tr, best[0]])
    return model, report


def _hyper_dict(h: Hyper):
    return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in h.__dict__.items()
            if k != "freeze_mask"} | {"frozen_params": int(np.sum(h.freeze_mask)) if h.freeze_mask is not None else None}


def pretrain(dataset, epochs=400, seed=0, arch: Architecture = None, **kw):
    model = fit_normalization(init_model(arch, seed), dataset)
    return train(model, dataset, Hyper(epochs=epochs, seed=seed, **kw))


def transfer_finetune(pretrained: SurrogateModel, sparse, epochs=3000, lr=2e-4, seed=0,
                      dropout=0.0, min_samples=100):
    """Freeze the frequency encoder; retrain the heads and coefficient generators."""
    pretrained.check()
    if len(sparse) < min_samples:
        raise ValueError(f"fine-tuning needs at least {min_samples} samples, got {len(sparse)}")
    model = pretrained.copy()
    model.freeze = model.layer_mask("enc")
    model.meta["finetuned_from"] = pretrained.meta.get("trained_on", "")
    return train(model, sparse, Hyper(epochs=epochs, lr=lr, seed=seed, dropout=dropout))


def source_grid():
    axes = [np.round(np.arange(lo, hi + 1e-9, st), 10) for lo, hi, st in SOURCE_GRID.values()]
    return np.array(np.meshgrid(*axes, indexing="ij")).reshape(4, -1).T


def analytic_samples(vsc: VscParams, grid: GridParams, ops_pu, freqs, provenance="analytic"):
    """Per-unit analytic samples at every (op, f) pair of ``ops_pu`` x ``freqs``."""
    from .measurement import AdmittanceDataset, AdmittanceSample
    b = per_unit_base(vsc, grid)
    out = []
    for op in np.asarray(ops_pu, dtype=float).reshape(-1, 4):
        si = OperatingPoint(op[0] * b.voltage, op[1] * b.voltage, op[2] * b.current, op[3] * b.current)
        ys = admittance_matrices(model_at(vsc, grid, si), freqs) * b.impedance
        opp = OperatingPoint(*op)
        for f, y in zip(freqs, ys):
            out.append(AdmittanceSample(vsc.id, opp, float(f), Admittance2x2.from_matrix(y, f), provenance))
    return AdmittanceDataset(out)


def analytic_dataset(vsc: VscParams, grid: GridParams, n=2500, seed=0, n_freq=60):
    """Random subsample of the dense (op grid) x (log-spaced f in [1, 150] Hz) grid."""
    from .measurement import AdmittanceDataset, AdmittanceSample
    ops = source_grid()
    freqs = np.geomspace(*F_ENVELOPE, n_freq)
    total = len(ops) * n_freq
    if n > total:
        raise ValueError(f"requested {n} samples from a grid of {total}")
    pick = np.random.default_rng(seed).choice(total, size=n, replace=False)
    oi, fi = np.divmod(pick, n_freq)
    b = per_unit_base(vsc, grid)
    samples = []
    for k in np.unique(oi):
        op = ops[k]
        sel = fi[oi == k]
        si = OperatingPoint(op[0] * b.voltage, op[1] * b.voltage, op[2] * b.current, op[3] * b.current)
        ys = admittance_matrices(model_at(vsc, grid, si), freqs[sel]) * b.impedance
        for f, y in zip(freqs[sel], ys):
            samples.append(AdmittanceSample(vsc.id, OperatingPoint(*op), float(f),
                                            Admittance2x2.from_matrix(y, f), "analytic"))
    return AdmittanceDataset(samples, f"analytic:{vsc.id}:{n}:{seed}:{n_freq}")


def qmc_ops(n, seed=0, lo=(0.8, -0.2, -1.0, -1.0), hi=(1.2, 0.2, 1.0, 1.0)):
    """Latin-hypercube operating points inside a box, used for held-out grids."""
    s = qmc.LatinHypercube(d=4, seed=seed).random(n)
    return qmc.scale(s, lo, hi)
