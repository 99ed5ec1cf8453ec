"""
Leaky integrate-and-fire neurons and surrogate gradients
========================================================

A constant current drives one neuron; the membrane charges, crosses
threshold and is reset by subtraction on the following step.
"""

import numpy as np

from neuromotor import autodiff as ad
from neuromotor.lif import LifConfig, lif_step, reset_state

cfg = LifConfig(beta=0.5, theta=1.0)
state = reset_state(1)
for t in range(6):
    spike, state = lif_step(state, np.array([0.6]), cfg)
    print(f"t={t} u={state.u.value[0]:.4f} spike={int(spike.value[0])}")

# %%
# The forward spike is a step; the backward pass uses a fast-sigmoid
# surrogate whose slope peaks at threshold and decays as 1/(1+|x|)^2.

for v in (1.0, 1.5, 2.0, 3.0):
    x = ad.parameter(np.array([v]))
    ad.backward(ad.sum(ad.spike(x)))
    print(f"u={v:.1f} (theta 1) surrogate grad={x.grad[0]:.4f}")
