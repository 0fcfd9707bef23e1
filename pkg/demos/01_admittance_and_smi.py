# %% [markdown]
# # Unit admittances and the stability margin index
# Build the five-unit microgrid, evaluate each unit's dq admittance at its
# nominal operating point and compute the margin of the assembled loop gain.

# %%
import numpy as np

from admx import attack as A
from admx.analytic import admittance_matrices, model_at
from admx.config import DispatchCommand, five_vsc
from admx.stability import smi, trace_loci
from admx.steady import nominal_params, solve_system

cfg = five_vsc()
state = solve_system(cfg)
print(f"PCC voltage {state.u_pcc:.2f} V, PCC reactive injection {state.q_pcc / 1e3:.1f} kvar")

# %%
freqs = np.array([5.0, 20.0, 50.0, 120.0])
for uid in cfg.ids:
    y = admittance_matrices(model_at(cfg.unit(uid), cfg.grid, state.op(uid)), freqs)
    print(uid, " ".join(f"|Ydd({f:g} Hz)|={abs(m[0, 0]):.3g} S" for f, m in zip(freqs, y)))

# %%
src = A.AnalyticSource(cfg)
res = smi(trace_loci(src.with_params(nominal_params(cfg)), state))
print(f"nominal SMI {res.m_k:.3f}, closest approach at {res.f_crit:.1f} Hz")

# %% [markdown]
# Push one unit to a corner of its command box and watch the margin move.

# %%
for cmd in (DispatchCommand(1.0, 1.0), DispatchCommand(-1.0, -1.0), DispatchCommand(-1.0, 1.0)):
    r = A.evaluate_point(cfg, "VSC-D", cmd, nominal_params(cfg), src)
    print(f"VSC-D at ({cmd.p_ref:+.0f}, {cmd.q_ref:+.0f}): SMI {r.m_k:.3f}")
