"""
Event-driven cost on a systolic array
=====================================

Cycles scale with the number of active presynaptic inputs, so silent
neurons are free.  The calibration network reproduces the reported
latency and energy.
"""

import numpy as np

from neuromotor.systolic import ArrayConfig, LayerJob, calibration_jobs, simulate_network

arr = ArrayConfig()
rep = simulate_network(calibration_jobs(), arr)
print(rep.to_json())

# %%
# Sweep input sparsity on one layer.

for frac in (1.0, 0.5, 0.25, 0.0):
    active = np.arange(64) < int(64 * frac)
    cycles = simulate_network([LayerJob(64, 64, 4, active)], arr).total_cycles
    print(f"active fraction {frac:.2f}: {cycles} cycles")
