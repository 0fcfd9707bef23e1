# %% [markdown]
# # Worst-case dispatch scan and time-domain check
# A coarse scan over each target's command box, the resulting vulnerability
# map and a simulation of the most damaging command.

# %%
import numpy as np

from admx import attack as A
from admx import sim
from admx.config import five_vsc

cfg = five_vsc()
spec = A.ScanSpec(targets=("VSC-A", "VSC-B", "VSC-C", "VSC-D"), step=0.5, n_samples=3)
rep = A.worst_case_scan(cfg, spec)
for uid, r in rep.units.items():
    print(f"{uid}: worst SMI {r.m_wc:.3f} at {r.command}")
print("most vulnerable unit:", rep.k_star)

# %%
vm = A.vulnerability_map(rep)
print("cells won per unit:", vm.counts())

# %%
p, q = rep.units[rep.k_star].command
tr = sim.run(sim.SimScenario(cfg, 4.0, events=(sim.Event(1.0, "ramp", rep.k_star, {"p_ref": p, "q_ref": q}),)))
v = sim.detect_instability(tr, t_start=1.0)
print(f"simulated verdict {v.verdict}, max |df| {v.max_deviation:.3f} Hz")
print("largest unit frequency excursion:",
      max(float(np.max(np.abs(tr.freq_deviation(u)))) for u in tr.units))
