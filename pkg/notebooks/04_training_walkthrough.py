"""
Behaviour cloning in miniature
==============================

Generate a few reach demonstrations, train a small policy for a handful of
epochs, then evaluate it closed-loop.  The end-to-end experiments use the
same calls at larger scale (see ``neuromotor experiment``).
"""

import numpy as np

from neuromotor.plant import TaskSpec
from neuromotor.policy import ModelConfig
from neuromotor.trainer import TrainConfig, evaluate, generate_demos, train

model = ModelConfig(K=2, D=8, n_hidden=16, gru_hidden=8, proj_dim=4, history=3, lif_window=2)
demos = generate_demos([TaskSpec("reach")], 8, seed=0, model_cfg=model)
ck = train(demos, TrainConfig(epochs=5, batch_episodes=4), model)
print("loss per epoch:", " ".join(f"{v:.4f}" for v in ck.loss_curve))

rep = evaluate(ck, [TaskSpec("reach")] * 4, ("success", "smoothness"), seed=100)
print(f"success rate {rep['success_rate']['reach']:.2f}, mean MAJ {np.mean(rep['maj']):.4g}")
