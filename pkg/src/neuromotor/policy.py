"""The three-tier controller: cortex -> cerebellum -> spinal cord.

:class:`HierarchicalPolicy` owns every trainable parameter and exposes a
batched control step used both for training (teacher-forced histories) and
for closed-loop rollouts (:func:`rollout`).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .cerebellar import (
    DEFAULT_STATE_SCALE,
    CerebellarModule,
    ReflexArc,
    ReflexConfig,
    StateHistory,
    refine,
)
from .cortical import (
    CorticalDelay,
    IntentCodec,
    Observation,
    QFormer,
    decode_velocity_policy,
    intent_schedule,
    qformer_distill,
    scripted_intent,
)
from .lif import LifConfig
from .plant import (
    Episode,
    Plant,
    PlantConfig,
    TaskSpec,
    TremorSource,
    clamp_action,
    expert_action,
    initial_state,
    phase_label,
)
from .spinal import ActivityTrace, SpinalNet, spinal_forward

DEFAULT_ACTION_SCALE = (0.01, 0.01, 0.01, 0.02, 0.02, 0.02, 1.0)


@dataclass(frozen=True)
class ModelConfig:
    K: int = 8
    D: int = 32
    n_hidden: int = 128
    n_blocks: int = 2
    beta_out: float = 1.0
    readout: str = "last"
    input_gain: float = 4.0
    block_gain: float = 1.0
    lif_beta: float = 0.9
    lif_theta: float = 1.0
    lif_window: int = 4
    reset_mode: str = "delayed_soft"
    surrogate_scale: float = 1.0
    history: int = 10
    gru_hidden: int = 64
    proj_dim: int = 32
    gate_mode: str = "channel"
    refine_cycles: int = 2
    bias: bool = True  # bias terms in the GRU, FiLM heads and spinal blocks
    window_encoding: str = "absolute"
    cortex: str = "scripted"  # or "qformer"
    feat_dim: int = 32
    feat_layers: int = 4
    layer_range: tuple = (2, 4)
    intent_seed: int = 0
    action_scale: tuple = DEFAULT_ACTION_SCALE
    no_cerebellum: bool = False
    single_step_snn: bool = False
    reflex_enabled: bool = True
    force_window: int = 20
    zscore_k: float = 4.0
    reflex_floor: float = 2.0
    retraction_gain: float = 0.01
    retraction_ticks: int = 5
    seed: int = 0

    def lif(self, smooth_reference: bool = False) -> LifConfig:
        return LifConfig(self.lif_beta, self.lif_theta, self.lif_window, self.reset_mode, self.surrogate_scale, smooth_reference)

    def reflex(self) -> ReflexConfig:
        return ReflexConfig(self.force_window, self.zscore_k, self.reflex_floor, self.retraction_gain, self.retraction_ticks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_range"] = list(self.layer_range)
        d["action_scale"] = list(self.action_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("layer_range", "action_scale"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


class HierarchicalPolicy:
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        self.lif_cfg = cfg.lif()
        self.codec = self.codec_for(cfg)
        self.qformer = None
        if cfg.cortex == "qformer":
            self.qformer = QFormer(cfg.K, cfg.D, cfg.feat_dim, cfg.layer_range, seed=cfg.seed + 7)
        elif cfg.cortex != "scripted":
            raise ValueError(f"unknown cortex {cfg.cortex!r}")
        self.cerebellum = CerebellarModule(
            cfg.K, cfg.D, cfg.gru_hidden, cfg.proj_dim, cfg.gate_mode, cfg.refine_cycles, DEFAULT_STATE_SCALE,
            seed=cfg.seed + 11, bias=cfg.bias, window_encoding=cfg.window_encoding,
        )
        self.spinal = SpinalNet(
            cfg.K * cfg.D, cfg.n_hidden, cfg.n_blocks, cfg.beta_out, cfg.readout, cfg.input_gain, cfg.block_gain,
            seed=cfg.seed + 23, block_bias=cfg.bias,
        )
        self.action_scale = np.asarray(cfg.action_scale, dtype=float)

    @staticmethod
    def codec_for(cfg: ModelConfig) -> IntentCodec:
        return IntentCodec(cfg.K, cfg.D, seed=cfg.intent_seed)

    @property
    def params(self) -> dict:
        p = {}
        if self.qformer is not None:
            p.update(self.qformer.params)
        if not self.cfg.no_cerebellum:
            p.update(self.cerebellum.params)
        p.update(self.spinal.params)
        return p

    def all_params(self) -> dict:
        """Every parameter including unused ones (checkpointing)."""
        p = dict(self.params)
        p.update(self.cerebellum.params)
        return dict(sorted(p.items()))

    def reset(self, batch: int | None = None) -> None:
        self.spinal.reset(batch)

    def semantic_latent(self, z_or_stack) -> ad.Node:
        """``z_sem`` from a scripted latent or (qformer cortex) a feature stack."""
        if self.qformer is None:
            return ad.as_node(z_or_stack)
        z, _ = qformer_distill(self.qformer, z_or_stack)
        return z

    def control_step(self, z_sem, window, record: bool = False, smooth_reference: bool = False):
        """One tick: returns (normalised action, refine result or None, activity)."""
        z_sem = ad.as_node(z_sem)
        batch = z_sem.shape[0] if z_sem.value.ndim == 3 else None
        if self.cfg.single_step_snn:
            self.spinal.reset(batch)
        result = None
        if self.cfg.no_cerebellum:
            z_mod = z_sem
        else:
            result = refine(self.cerebellum, z_sem, window)
            z_mod = result.z_mod
        lif_cfg = self.lif_cfg if not smooth_reference else self.cfg.lif(True)
        action, activity = spinal_forward(self.spinal, z_mod, lif_cfg, record=record)
        return action, result, activity

    def to_raw(self, action_norm: np.ndarray) -> np.ndarray:
        return np.asarray(action_norm) * self.action_scale

    def to_norm(self, action_raw: np.ndarray) -> np.ndarray:
        return np.asarray(action_raw) / self.action_scale


# ------------------------------------------------------------------- rollouts


@dataclass
class RolloutResult:
    episode: Episode
    trace: ActivityTrace
    z_sem: list = field(default_factory=list)
    reflex_ticks: list = field(default_factory=list)  # ticks where the reflex overrode


def intent_features(codec: IntentCodec, z_sem: np.ndarray, n_layers: int, d_feat: int, rng: np.random.Generator) -> np.ndarray:
    """Synthetic feature stack carrying an intent latent in token 0.

    Other tokens are clutter; the latent occupies the first ``d_feat`` columns
    of each of ``K`` tokens.  Used only with the Q-Former cortex.
    """
    K, D = z_sem.shape
    n_tokens = K + 2
    feats = rng.normal(0, 0.1, size=(n_layers, n_tokens, d_feat))
    width = min(D, d_feat)
    feats[:, :K, :width] += z_sem[:, :width]
    return feats


def rollout(
    policy: HierarchicalPolicy | None,
    tasks: list[TaskSpec],
    seeds: list[int] | None = None,
    *,
    mode: str = "network",
    cortical_delay: int = 0,
    freeze_at: int | None = None,
    tremor: bool = True,
    plant_cfg: PlantConfig = PlantConfig(),
    record: bool = True,
    codec: IntentCodec | None = None,
    reflex: bool | None = None,
    history: int | None = None,
    reflex_cfg: ReflexConfig | None = None,
) -> list[RolloutResult]:
    """Closed-loop rollouts of a batch of episodes of equal length.

    ``mode`` selects the lower tiers: ``network`` (the policy), ``expert``
    (scripted demonstrator) or ``decoder`` (velocity slots of the delayed
    cortical latent, no learning involved).
    """
    if mode not in ("network", "expert", "decoder"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    n_ticks = {t.episode_ticks for t in tasks}
    if len(n_ticks) != 1:
        raise ValueError("tasks in one rollout batch must share episode_ticks")
    n_ticks = n_ticks.pop()
    seeds = list(range(len(tasks))) if seeds is None else list(seeds)
    cfg = policy.cfg if policy is not None else ModelConfig()
    codec = codec or (policy.codec if policy is not None else IntentCodec(cfg.K, cfg.D, cfg.intent_seed))
    use_reflex = (cfg.reflex_enabled and not cfg.no_cerebellum) if reflex is None else reflex
    horizon = history or cfg.history
    B = len(tasks)

    plants, hists, arcs, delays, tremors, schedules, results = [], [], [], [], [], [], []
    for task, seed in zip(tasks, seeds):
        plant = Plant(initial_state(task.start_pose, task.gripper, plant_cfg), [task.obstacle] if task.obstacle else [], plant_cfg, seed)
        hist = StateHistory(horizon, wrench_capacity=max(64, (reflex_cfg or cfg.reflex()).force_window + 1))
        hist.prefill(plant.state)
        plants.append(plant)
        hists.append(hist)
        arcs.append(ReflexArc(reflex_cfg or cfg.reflex()))
        delays.append(CorticalDelay(cortical_delay))
        tremors.append(TremorSource(task.noise_sigma if tremor else 0.0, seed + 10_000))
        schedules.append(intent_schedule(task, codec))
        results.append(RolloutResult(Episode(task), ActivityTrace()))
    if policy is not None:
        policy.reset(B)
    feat_rng = np.random.default_rng(seeds[0] + 777)
    frozen = [None] * B

    for t in range(n_ticks):
        z_batch, windows, overrides = [], [], []
        for b in range(B):
            st = plants[b].state
            if t > 0:
                hists[b].push_plant(st)
            obs = Observation(t, st, tasks[b])
            z = tremors[b](scripted_intent(schedules[b], obs))
            z = delays[b](z)
            if freeze_at is not None and t >= freeze_at:
                if frozen[b] is None:
                    frozen[b] = z
                z = frozen[b]
            results[b].z_sem.append(z)
            z_batch.append(z)
            windows.append(hists[b].window())
            cmd = arcs[b](hists[b], new_samples=plant_cfg.substeps if t > 0 else 1) if use_reflex else None
            overrides.append(cmd)
        if mode == "network":
            z_in = np.array(z_batch)
            if policy.qformer is not None:
                z_in = np.array([intent_features(codec, z, cfg.feat_layers, cfg.feat_dim, feat_rng) for z in z_batch])
            win = policy.cerebellum.normalise(np.array(windows))
            z_node = policy.semantic_latent(z_in)
            action_norm, _, activity = policy.control_step(z_node, ad.constant(win), record=record)
            raw = policy.to_raw(action_norm.value)
        for b in range(B):
            if mode == "network":
                a = raw[b]
                if record and activity is not None:
                    results[b].trace.append(activity, b)
            elif mode == "expert":
                a = expert_action(tasks[b], plants[b].state, plant_cfg, sustain=frozen[b] is not None)
            else:
                a = decode_velocity_policy(codec, z_batch[b], plants[b].state.gripper)
            if overrides[b] is not None:
                a = overrides[b]
                results[b].reflex_ticks.append(t)
            a = clamp_action(a, plant_cfg)
            ep = results[b].episode
            ep.states.append(plants[b].state)
            ep.actions.append(a)
            ep.phases.append(phase_label(tasks[b], t))
            plants[b].step(a)
    for b in range(B):
        results[b].episode.states.append(plants[b].state)
    return results
