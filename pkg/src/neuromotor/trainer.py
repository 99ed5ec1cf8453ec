"""Behaviour cloning for the hierarchy.

Demonstrations come from the scripted expert driving the plant; training
minimises the squared action error (in normalised action units) plus a
forward-model loss on the anticipated next state, backpropagating through
the unrolled spiking network with surrogate gradients.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, NonFiniteError
from .cerebellar import StateHistory
from .cortical import INTENT_DIM
from .plant import (
    STATE_DIM,
    PlantConfig,
    TaskSpec,
    count_cycles,
    sample_task,
    smoothness_metrics,
)
from .policy import HierarchicalPolicy, ModelConfig, RolloutResult, intent_features, rollout
from .spinal import ACTION_SIZE, firing_rate_report


class TrainingDiverged(FloatingPointError):
    """Loss or gradients became non-finite."""


# ---------------------------------------------------------------------- demos


@dataclass
class Demo:
    """One expert episode, aligned per control tick."""

    task: TaskSpec
    z_sem: np.ndarray  # [T, K, D] cortical latent as seen by the lower tiers
    windows: np.ndarray  # [T, H, STATE_DIM] raw proprioceptive history
    actions: np.ndarray  # [T, 7] expert command
    next_states: np.ndarray  # [T, STATE_DIM]
    phases: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.actions)
        if not (len(self.z_sem) == len(self.windows) == len(self.next_states) == n):
            raise ContractError("demo sequences have different lengths")

    def __len__(self) -> int:
        return len(self.actions)


def _windows_from_states(states, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    hist = StateHistory(horizon)
    hist.prefill(states[0])
    windows = []
    for t, s in enumerate(states[:-1]):
        if t > 0:
            hist.push_plant(s)
        windows.append(hist.window())
    nxt = np.array([s.state_vector() for s in states[1:]])
    return np.array(windows), nxt


def generate_demos(
    tasks: list[TaskSpec],
    n: int,
    seed: int = 0,
    *,
    model_cfg: ModelConfig = ModelConfig(),
    plant_cfg: PlantConfig = PlantConfig(),
    tremor: bool = True,
    freeze_prob: float = 0.0,
) -> list[Demo]:
    """``n`` expert episodes cycling through the task templates.

    Each demo samples the template's free fields, rolls the expert out in the
    plant and records the (possibly tremor-corrupted) cortical latent.  With
    ``freeze_prob`` > 0 a demo's latent is held constant from a random tick of
    its active phase onward, so the lower tiers learn to continue a movement
    from proprioception alone.
    """
    if n < 1:
        raise ContractError("need at least one demo")
    if not tasks:
        raise ContractError("empty task list")
    rng = np.random.default_rng(seed)
    demos = []
    for i in range(n):
        task = sample_task(tasks[i % len(tasks)], rng)
        ep_seed = int(rng.integers(2**31))
        freeze_at = None
        if freeze_prob > 0 and rng.random() < freeze_prob:
            start, stop = task.active_window
            freeze_at = int(rng.integers(start, max(stop, start + 1)))
        (res,) = rollout(
            None, [task], [ep_seed], mode="expert", tremor=tremor, plant_cfg=plant_cfg, freeze_at=freeze_at,
            record=False, codec=HierarchicalPolicy.codec_for(model_cfg), history=model_cfg.history, reflex=False,
        )
        windows, nxt = _windows_from_states(res.episode.states, model_cfg.history)
        demos.append(Demo(task, np.array(res.z_sem), windows, np.array(res.episode.actions), nxt, list(res.episode.phases)))
    return demos


# -------------------------------------------------------------------- config


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_episodes: int = 16
    epochs: int = 20
    seed: int = 0
    bc_weight: float = 1.0
    forward_model_weight: float = 0.1
    no_cerebellum: bool = False
    single_step_snn: bool = False
    tbptt: int = 40
    grad_clip: float = 1.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0  # decoupled, as in AdamW

    def __post_init__(self):
        if not self.lr >= 0:  # lr = 0 is allowed as a frozen run
            raise ContractError("lr must be >= 0")
        if self.bc_weight < 0 or self.forward_model_weight < 0:
            raise ContractError("loss weights must be >= 0")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be >= 0")
        if self.batch_episodes < 1 or self.epochs < 0 or self.tbptt < 1:
            raise ContractError("batch_episodes and tbptt must be >= 1, epochs >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


class Adam:
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.value
            p.value = p.value - self.lr * update


# ---------------------------------------------------------------- checkpoint

MAGIC = b"NMCKPT\x00\x01"
VERSION = 1


@dataclass
class Checkpoint:
    model: ModelConfig
    train: TrainConfig
    weights: dict  # name -> ndarray
    loss_curve: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return float(self.loss_curve[-1]) if self.loss_curve else float("nan")

    def policy(self) -> HierarchicalPolicy:
        pol = HierarchicalPolicy(self.model)
        params = pol.all_params()
        for name, value in self.weights.items():
            if name not in params:
                raise DimensionError(f"checkpoint weight {name!r} has no slot in the model")
            if params[name].shape != value.shape:
                raise DimensionError(f"{name}: checkpoint {value.shape} vs model {params[name].shape}")
            params[name].value = np.array(value, dtype=float)
        return pol

    def to_bytes(self) -> bytes:
        header = json.dumps(
            {"model": self.model.to_dict(), "train": self.train.to_dict(), "loss_curve": [float(x) for x in self.loss_curve]},
            sort_keys=True,
        ).encode()
        names = sorted(self.weights)
        manifest = json.dumps([[n, list(self.weights[n].shape)] for n in names]).encode()
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", VERSION))
        for blob in (header, manifest):
            buf.write(struct.pack("<Q", len(blob)))
            buf.write(blob)
        for n in names:
            buf.write(np.ascontiguousarray(self.weights[n], dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[: len(MAGIC)] != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        off = len(MAGIC)
        (version,) = struct.unpack_from("<I", data, off)
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        off += 4
        blobs = []
        for _ in range(2):
            (length,) = struct.unpack_from("<Q", data, off)
            off += 8
            blobs.append(data[off : off + length])
            off += length
        header, manifest = json.loads(blobs[0]), json.loads(blobs[1])
        weights = {}
        for name, shape in manifest:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
            weights[name] = arr.astype(float)
            off += 8 * count
        if off != len(data):
            raise ValueError("trailing bytes after weight data")
        return cls(ModelConfig.from_dict(header["model"]), TrainConfig.from_dict(header["train"]), weights, header["loss_curve"])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def checkpoint_of(policy: HierarchicalPolicy, train_cfg: TrainConfig = TrainConfig(), loss_curve=()) -> Checkpoint:
    weights = {k: p.value.copy() for k, p in policy.all_params().items()}
    return Checkpoint(policy.cfg, train_cfg, weights, list(loss_curve))


# ------------------------------------------------------------------ training


def _batch_inputs(policy: HierarchicalPolicy, demos: list[Demo], t0: int, t1: int, feat_rng):
    """Per tick inputs for ticks [t0, t1) of a batch of equal-length demos."""
    cfg = policy.cfg
    z = np.stack([d.z_sem[t0:t1] for d in demos], axis=1)  # [ticks, B, K, D]
    if policy.qformer is not None:
        z = np.array([[intent_features(policy.codec, zz, cfg.feat_layers, cfg.feat_dim, feat_rng) for zz in row] for row in z])
    win = policy.cerebellum.normalise(np.stack([d.windows[t0:t1] for d in demos], axis=1))
    act = policy.to_norm(np.stack([d.actions[t0:t1] for d in demos], axis=1))
    last = np.stack([d.windows[t0:t1, -1] for d in demos], axis=1)
    nxt = policy.cerebellum.normalise_next(np.stack([d.next_states[t0:t1] for d in demos], axis=1), last)
    return z, win, act, nxt


def sequence_loss(policy: HierarchicalPolicy, z, win, act, nxt, cfg: TrainConfig, smooth_reference: bool = False) -> ad.Node:
    """Hybrid loss over a segment; membranes carry over from ``policy.spinal``."""
    use_fm = not policy.cfg.no_cerebellum and policy.cfg.refine_cycles > 1 and cfg.forward_model_weight > 0
    terms = []
    for t in range(len(z)):
        z_sem = policy.semantic_latent(z[t])
        action, result, _ = policy.control_step(z_sem, ad.constant(win[t]), smooth_reference=smooth_reference)
        err = action - act[t]
        loss = ad.mean(err * err) * cfg.bc_weight
        if use_fm and result is not None and result.predicted_state is not None:
            e = result.predicted_state - nxt[t]
            loss = loss + ad.mean(e * e) * cfg.forward_model_weight
        terms.append(loss)
    return ad.mean(ad.stack(terms, axis=0))


def _batches(demos: list[Demo], size: int, rng: np.random.Generator) -> list[list[int]]:
    groups: dict = {}
    for i, d in enumerate(demos):
        groups.setdefault(len(d), []).append(i)
    batches = []
    for length in sorted(groups):
        idx = [groups[length][j] for j in rng.permutation(len(groups[length]))]
        batches.extend(idx[k : k + size] for k in range(0, len(idx), size))
    return [batches[j] for j in rng.permutation(len(batches))]


def _clip(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not math.isfinite(norm):
        raise TrainingDiverged("non-finite gradient norm")
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def train(
    demos: list[Demo],
    cfg: TrainConfig = TrainConfig(),
    model_cfg: ModelConfig = ModelConfig(),
    log=None,
) -> Checkpoint:
    """Fit a fresh policy to ``demos``; returns a checkpoint with the loss curve."""
    if not demos:
        raise ContractError("no demos to train on")
    model_cfg = replace(model_cfg, no_cerebellum=model_cfg.no_cerebellum or cfg.no_cerebellum,
                        single_step_snn=model_cfg.single_step_snn or cfg.single_step_snn)
    policy = HierarchicalPolicy(model_cfg)
    params = policy.params
    opt = Adam(params, cfg.lr, cfg.adam_betas, cfg.adam_eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    feat_rng = np.random.default_rng(cfg.seed + 1)
    curve = []
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for batch in _batches(demos, cfg.batch_episodes, rng):
            group = [demos[i] for i in batch]
            policy.reset(len(group))
            n_ticks = len(group[0])
            for t0 in range(0, n_ticks, cfg.tbptt):
                t1 = min(t0 + cfg.tbptt, n_ticks)
                inputs = _batch_inputs(policy, group, t0, t1, feat_rng)
                try:
                    loss = sequence_loss(policy, *inputs, cfg)
                except NonFiniteError as exc:
                    raise TrainingDiverged(f"epoch {epoch}: non-finite value in forward pass ({exc})") from exc
                ad.zero_grad(params.values())
                ad.backward(loss)
                grads = {k: p.grad for k, p in params.items()}
                _clip(grads, cfg.grad_clip)
                opt.step(grads)
                policy.spinal.detach()
                total += float(loss.value) * (t1 - t0) * len(group)
                count += (t1 - t0) * len(group)
        curve.append(total / count)
        if not math.isfinite(curve[-1]):
            raise TrainingDiverged(f"epoch {epoch}: loss is {curve[-1]}")
        if log is not None:
            log(epoch, curve[-1])
    return checkpoint_of(policy, cfg, curve)


# ---------------------------------------------------------------- evaluation

REACH_TOL = 0.01  # m
ROT_TOL = 0.02  # rad
HOLD_TOL = 0.005  # m
GRIPPER_MATCH = 0.9
CONTACT_FORCE = 2.0  # N


def _drift(poses: np.ndarray) -> tuple[float, float]:
    d = poses - poses[0]
    return float(np.linalg.norm(d[:, :3], axis=1).max()), float(np.abs(d[:, 3:]).max())


def shake_cycles(res: RolloutResult) -> np.ndarray:
    task = res.episode.task
    signal = res.episode.poses()[:, task.shake_axis]
    return count_cycles(signal, min_prominence=task.shake_amplitude)


def task_success(res: RolloutResult) -> bool:
    ep = res.episode
    task = ep.task
    poses = ep.poses()
    if task.kind == "reach":
        err = poses[-1] - np.asarray(task.target)
        return bool(np.linalg.norm(err[:3]) < REACH_TOL and np.abs(err[3:]).max() < ROT_TOL)
    if task.kind == "shake":
        peaks = shake_cycles(res)
        if len(peaks) < task.shake_cycles:
            return False
        return bool(np.all(np.abs(np.diff(peaks) - task.shake_period) <= 1))
    if task.kind == "static_hold":
        trans, rot = _drift(poses)
        return trans < HOLD_TOL and rot < 2 * HOLD_TOL
    if task.kind == "static_pose_dynamic_gripper":
        trans, rot = _drift(poses)
        start, stop = task.active_window
        half = task.gripper_period // 2
        want = [1.0 if ((t - start) // half) % 2 == 0 else 0.0 for t in range(start, stop)]
        got = [round(float(a[6])) for a in ep.actions[start:stop]]
        match = np.mean(np.array(want) == np.array(got))
        return trans < HOLD_TOL and rot < 2 * HOLD_TOL and match >= GRIPPER_MATCH
    if task.kind == "collision_course":
        lat = retraction_latency(res)
        return lat is not None and lat <= 2
    if task.kind == "delayed_cue":
        q = task.pre_hold + task.cue_lag
        dx = float(ep.actions[q][0])
        return bool(np.sign(dx) == task.cue and abs(dx) > 0.005)
    raise ValueError(task.kind)


def first_contact(res: RolloutResult) -> int | None:
    for t, s in enumerate(res.episode.states):
        if np.any(np.linalg.norm(s.wrench_samples[:, :3], axis=1) > CONTACT_FORCE):
            return t
    return None


def retraction_latency(res: RolloutResult) -> int | None:
    """Ticks from the first observed contact to the first command moving out.

    Contact is observed in the state at tick ``c`` (the plant step issued at
    tick ``c - 1`` hit the wall); latency 1 means the command issued at tick
    ``c`` already retracts.
    """
    c = first_contact(res)
    task = res.episode.task
    if c is None or task.obstacle is None:
        return None
    n = np.asarray(task.obstacle.normal)
    for t in range(c, len(res.episode.actions)):
        if float(np.dot(res.episode.actions[t][:3], n)) > 0:
            return t - c + 1
    return None


def evaluate(
    checkpoint: Checkpoint | None,
    tasks: list[TaskSpec],
    metrics=("success", "smoothness", "firing"),
    *,
    seed: int = 0,
    mode: str = "network",
    batch: int = 16,
    plant_cfg: PlantConfig = PlantConfig(),
    **rollout_kwargs,
) -> dict:
    """Closed-loop evaluation; ``checkpoint=None`` with ``mode='expert'`` replays the expert."""
    policy = None
    if checkpoint is not None:
        policy = checkpoint.policy()
        cfg = policy.cfg
        if cfg.K * cfg.D < INTENT_DIM:
            raise DimensionError("checkpoint latent too small for the task intents")
        if policy.spinal.params["spinal.w_out"].shape[1] != ACTION_SIZE or policy.cerebellum.gru.d_in != STATE_DIM:
            raise DimensionError("checkpoint action/state dims do not match the plant")
    elif mode == "network":
        raise ContractError("network evaluation needs a checkpoint")
    rng = np.random.default_rng(seed)
    concrete = [sample_task(t, rng) for t in tasks]
    seeds = [int(s) for s in rng.integers(2**31, size=len(concrete))]
    results: list[RolloutResult] = []
    order = sorted(range(len(concrete)), key=lambda i: concrete[i].episode_ticks)
    for k in range(0, len(order), batch):
        idx = order[k : k + batch]
        # batches must share a length; split on changes
        groups: dict = {}
        for i in idx:
            groups.setdefault(concrete[i].episode_ticks, []).append(i)
        for ids in groups.values():
            out = rollout(policy, [concrete[i] for i in ids], [seeds[i] for i in ids], mode=mode, plant_cfg=plant_cfg,
                          record="firing" in metrics and mode == "network", **rollout_kwargs)
            results.extend(zip(ids, out))
    results = [r for _, r in sorted(results, key=lambda x: x[0])]
    report: dict = {"n_episodes": len(results), "tasks": [r.episode.task.kind for r in results]}
    if "success" in metrics:
        ok = [task_success(r) for r in results]
        report["success"] = ok
        by_kind: dict = {}
        for r, s in zip(results, ok):
            by_kind.setdefault(r.episode.task.kind, []).append(s)
        report["success_rate"] = {k: float(np.mean(v)) for k, v in by_kind.items()}
    if "smoothness" in metrics:
        sm = [smoothness_metrics(r.episode.actions) for r in results]
        report["maj"] = np.mean([m["maj"] for m in sm], axis=0).tolist()
        report["maca"] = np.mean([m["maca"] for m in sm], axis=0).tolist()
    if "firing" in metrics and mode == "network":
        reps = [firing_rate_report(r.trace, r.episode.phases) for r in results]
        phases = sorted({p for rep in reps for p in rep.phases})
        report["layer_rates"] = {
            p: np.mean([rep.layer_means[p] for rep in reps if p in rep.layer_means], axis=0).tolist() for p in phases
        }
    report["rollouts"] = results
    return report
