"""
Kinematic plant, expert demonstrations and the spinal reflex
============================================================

The expert drives the arm into a wall.  With a 10-tick cortical delay the
slow loop only reacts 200 ms later; the z-score reflex retracts on the next
tick.
"""

import numpy as np

from neuromotor.config import DEFAULTS
from neuromotor.plant import TaskSpec, rollout_expert, sample_task
from neuromotor.policy import rollout
from neuromotor.trainer import first_contact, retraction_latency

sec = DEFAULTS["experiments"]["reflex"]
task = sample_task(TaskSpec.from_dict(sec["task"]), np.random.default_rng(0))
ep = rollout_expert(task)
fx = np.array([s.wrench[0] for s in ep.states])
print(f"expert episode: {len(ep.actions)} ticks, peak |Fx| {np.abs(fx).max():.1f} N")

# %%
# Reflex on and off, with the cortical latent delayed by 10 ticks.

for reflex in (True, False):
    (res,) = rollout(None, [task], [0], mode="decoder", cortical_delay=sec["cortical_delay"], reflex=reflex, record=False)
    print(f"reflex={reflex}: contact at tick {first_contact(res)}, retraction after {retraction_latency(res)} ticks")
