"""Desk-scale cortical tier.

Two ways to produce the semantic latent ``z_sem`` (shape ``[K, D]``):

* :func:`qformer_distill` -- learnable queries cross-attend to a synthetic
  multi-layer feature stack (a stand-in for a frozen VLM's hidden states);
* :func:`scripted_intent` -- a phase schedule that emits an intent vector,
  embedded into ``[K, D]`` by a fixed orthonormal :class:`IntentCodec`.

:class:`CorticalDelay` models the cortical loop's inference latency.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Node
from .plant import PlantState, TaskSpec

# intent vector layout.  Intents are demand-driven: an idle arm with an open
# gripper is the zero vector, "gripper" carries the closing command 1 - target.
INTENT_SLOTS = {
    "displacement": slice(0, 6),
    "gripper": 6,
    "shake_active": 7,
    "shake_sign": 8,
    "velocity": slice(9, 12),
    "cue": 12,
    "query": 13,
    "progress": 14,
}
INTENT_DIM = 15
DISPLACEMENT_SCALE = np.array([0.1, 0.1, 0.1, 0.15, 0.15, 0.15])
VELOCITY_SCALE = 0.01  # m per tick
SHAKE_SIGN_GAIN = 0.2  # weak phase hint; the rhythm itself comes from proprioception


class ScheduleError(LookupError):
    """No schedule entry covers the current phase."""


class IntentCodec:
    """Fixed orthonormal embedding of intent vectors into ``[K, D]`` latents."""

    def __init__(self, K: int = 8, D: int = 32, seed: int = 0, dim: int = INTENT_DIM):
        if K * D < dim:
            raise ContractError(f"latent {K}x{D} too small for a {dim}-d intent")
        self.K, self.D, self.dim = K, D, dim
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.normal(size=(K * D, dim)))
        self.basis = q  # [K*D, dim], orthonormal columns

    def encode(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return (v @ self.basis.T).reshape(v.shape[:-1] + (self.K, self.D))

    def decode(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return z.reshape(z.shape[:-2] + (self.K * self.D,)) @ self.basis


# ------------------------------------------------------------- scripted intent


@dataclass
class Observation:
    t: int
    state: PlantState
    task: TaskSpec


Predicate = Callable[[Observation], bool]
Generator = Callable[[Observation], np.ndarray]


@dataclass
class IntentSchedule:
    entries: list[tuple[Predicate, Generator]]
    codec: IntentCodec


def scripted_intent(schedule: IntentSchedule, obs: Observation) -> np.ndarray:
    """Latent of the first schedule entry whose predicate holds."""
    for predicate, generate in schedule.entries:
        if predicate(obs):
            return schedule.codec.encode(generate(obs))
    raise ScheduleError(f"no intent covers tick {obs.t} of {obs.task.kind!r}")


def _intent(**slots) -> np.ndarray:
    v = np.zeros(INTENT_DIM)
    for name, value in slots.items():
        v[INTENT_SLOTS[name]] = value
    return v


def intent_schedule(task: TaskSpec, codec: IntentCodec, contact_threshold: float = 2.0) -> IntentSchedule:
    """Phase schedule realising the cortical plan for ``task``."""
    start, stop = task.active_window

    def active(o: Observation) -> bool:
        return start <= o.t < stop

    def always(o: Observation) -> bool:
        return True

    closing = 1.0 - task.gripper
    hold = lambda o: _intent(gripper=closing)  # noqa: E731
    kind = task.kind
    if kind == "reach":
        target = np.asarray(task.target)

        def reach(o):
            progress = min(max((o.t - start) / task.duration, 0.0), 1.0)
            disp = (target - o.state.ee_pose) / DISPLACEMENT_SCALE
            return _intent(displacement=disp, progress=progress, gripper=closing)

        def settle(o):
            return _intent(displacement=(target - o.state.ee_pose) / DISPLACEMENT_SCALE, gripper=closing)

        entries = [(lambda o: o.t < start, hold), (active, reach), (always, settle)]
    elif kind == "shake":
        omega = 2.0 * math.pi / task.shake_period

        def shake(o):
            sign = 1.0 if math.sin(omega * (o.t - start) + 1e-9) >= 0 else -1.0
            return _intent(shake_active=1.0, shake_sign=SHAKE_SIGN_GAIN * sign, gripper=closing)

        entries = [(active, shake), (always, hold)]
    elif kind == "static_pose_dynamic_gripper":
        half = task.gripper_period // 2

        def grip(o):
            return _intent(gripper=0.0 if ((o.t - start) // half) % 2 == 0 else 1.0)

        entries = [(active, grip), (always, hold)]
    elif kind == "collision_course":
        n = np.asarray(task.obstacle.normal) if task.obstacle is not None else np.array([-1.0, 0.0, 0.0])

        def in_contact(o):
            return float(np.linalg.norm(o.state.wrench[:3])) > contact_threshold

        def retract(o):
            f = o.state.wrench[:3]
            return _intent(velocity=f / np.linalg.norm(f) * task.approach_speed / VELOCITY_SCALE, gripper=closing)

        def approach(o):
            return _intent(velocity=-n * task.approach_speed / VELOCITY_SCALE, gripper=closing)

        entries = [(in_contact, retract), (active, approach), (always, hold)]
    elif kind == "delayed_cue":
        entries = [
            (lambda o: o.t == task.pre_hold, lambda o: _intent(cue=float(task.cue), gripper=closing)),
            (active, lambda o: _intent(query=1.0, gripper=closing)),
            (always, hold),
        ]
    else:  # static_hold
        entries = [(always, hold)]
    return IntentSchedule(entries, codec)


def decode_velocity_policy(codec: IntentCodec, z_sem, gripper: float) -> np.ndarray:
    """Read the velocity-command slots straight out of a latent.

    A transparent, untrained stand-in for the lower tiers, used when only the
    latency structure of the hierarchy matters.
    """
    v = codec.decode(z_sem)
    a = np.zeros(7)
    a[:3] = v[INTENT_SLOTS["velocity"]] * VELOCITY_SCALE
    a[6] = gripper
    return a


# ------------------------------------------------------------------ delay line


class CorticalDelay:
    """Emit the input stream ``delay_ticks`` control ticks late.

    Until the first input has propagated, the initial hold value is emitted.
    """

    def __init__(self, delay_ticks: int, initial=None):
        if delay_ticks < 0:
            raise ContractError("delay_ticks must be >= 0")
        self.delay = int(delay_ticks)
        self.initial = initial
        self.buffer: deque = deque()

    def __call__(self, z):
        if self.initial is None:
            self.initial = z
        self.buffer.append(z)
        if len(self.buffer) > self.delay:
            return self.buffer.popleft()
        return self.initial


def cortical_delay(stream: Sequence, delay_ticks: int, initial=None) -> list:
    line = CorticalDelay(delay_ticks, initial)
    return [line(z) for z in stream]


# -------------------------------------------------------------------- Q-Former


@dataclass
class FeatureStack:
    features: np.ndarray  # [L, N, D_feat]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 3 or self.features.shape[0] < 1:
            raise DimensionError(f"feature stack must be [L, N, D_feat], got {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValueError("feature stack contains non-finite values")

    @property
    def n_layers(self) -> int:
        return self.features.shape[0]


class QFormer:
    """Single-head, single-block cross attention from ``K`` learned queries.

    ``layer_range`` is 1-based and inclusive.
    """

    def __init__(self, K: int = 8, D: int = 32, d_feat: int = 32, layer_range=(1, 1), seed: int = 0, prefix: str = "qformer"):
        l0, l1 = layer_range
        if not 1 <= l0 <= l1:
            raise ContractError(f"invalid layer range {layer_range}")
        self.K, self.D, self.d_feat = K, D, d_feat
        self.layer_range = (int(l0), int(l1))
        rng = np.random.default_rng(seed)
        self.params = {
            f"{prefix}.queries": ad.parameter(rng.normal(0, 1.0, (K, D))),
            f"{prefix}.w_key": ad.parameter(rng.normal(0, 1 / math.sqrt(d_feat), (d_feat, D))),
            f"{prefix}.w_value": ad.parameter(rng.normal(0, 1 / math.sqrt(d_feat), (d_feat, D))),
            f"{prefix}.w_out": ad.parameter(rng.normal(0, 1 / math.sqrt(D), (D, D))),
            f"{prefix}.b_out": ad.parameter(np.zeros(D)),
        }
        self.prefix = prefix

    def p(self, name: str) -> Node:
        return self.params[f"{self.prefix}.{name}"]

    def select(self, features: np.ndarray) -> np.ndarray:
        """Concatenate the configured layers along the token axis."""
        l0, l1 = self.layer_range
        n_layers = features.shape[-3]
        if l1 > n_layers:
            raise ContractError(f"layer range {self.layer_range} exceeds {n_layers} layers")
        chosen = features[..., l0 - 1 : l1, :, :]
        if chosen.shape[-3] == 0:
            raise ContractError("empty layer range")
        return chosen.reshape(chosen.shape[:-3] + (-1, chosen.shape[-1]))


def qformer_distill(qf: QFormer, stack) -> tuple[Node, np.ndarray]:
    """Return ``z_sem`` ``[..., K, D]`` and the attention weights ``[..., K, N_sel]``."""
    feats = stack.features if isinstance(stack, FeatureStack) else np.asarray(stack, dtype=float)
    if feats.shape[-1] != qf.d_feat:
        raise DimensionError(f"feature width {feats.shape[-1]} != {qf.d_feat}")
    tokens = ad.constant(qf.select(feats))
    keys = tokens @ qf.p("w_key")
    values = tokens @ qf.p("w_value")
    scores = (qf.p("queries") @ ad.swapaxes(keys, -1, -2)) * (1.0 / math.sqrt(qf.D))
    attn = ad.softmax(scores, axis=-1)
    z = (attn @ values) @ qf.p("w_out") + qf.p("b_out")
    return z, attn.value


def attention_rows(attn: np.ndarray) -> list[list]:
    """CSV rows (query, token, weight) for one attention map ``[K, N]``."""
    return [[q, n, float(attn[q, n])] for q in range(attn.shape[0]) for n in range(attn.shape[1])]


# ------------------------------------------------------ synthetic scene fixtures


@dataclass
class SceneBank:
    """Fixed embeddings shared by every synthetic scene of one experiment."""

    identities: np.ndarray  # [n_objects, d_feat]
    relevance: np.ndarray  # [d_feat]
    payload_dims: tuple[int, int]

    @classmethod
    def make(cls, d_feat: int = 32, n_objects: int = 8, seed: int = 0) -> "SceneBank":
        rng = np.random.default_rng(seed)
        basis, _ = np.linalg.qr(rng.normal(size=(d_feat - 2, n_objects + 1)))
        ident = np.zeros((n_objects, d_feat))
        ident[:, 2:] = basis[:, :n_objects].T
        rel = np.zeros(d_feat)
        rel[2:] = basis[:, n_objects]
        return cls(ident, rel, (0, 1))


def make_scene(bank: SceneBank, rng: np.random.Generator, n_layers: int = 4, n_clutter: int = 3, noise: float = 0.1):
    """One two-object scene.

    Token 0 is the instruction, tokens 1 and 2 the objects, the rest clutter.
    One object (chosen at random) is made visually salient; deeper layers mix
    instruction relevance into the object tokens.  Returns the stack, the
    instructed token index, and that object's 2-D position payload.
    """
    n_obj, d = bank.identities.shape
    ids = rng.choice(n_obj, size=2, replace=False)
    instructed = int(rng.integers(2))
    salient = int(rng.integers(2))
    positions = rng.uniform(-1, 1, size=(2, 2))
    n_tokens = 3 + n_clutter
    feats = np.zeros((n_layers, n_tokens, d))
    for layer in range(n_layers):
        mix = layer / max(n_layers - 1, 1)
        feats[layer, 0] = bank.identities[ids[instructed]]
        for j in range(2):
            gain = 3.0 if j == salient else 1.0
            tok = gain * bank.identities[ids[j]]
            tok[list(bank.payload_dims)] = positions[j]
            if j == instructed:
                tok = tok + 2.0 * mix * bank.relevance
            feats[layer, 1 + j] = tok
        feats[layer, 3:, 2:] = rng.normal(0, 0.5, size=(n_clutter, d - 2))
        feats[layer, 3:, :2] = rng.uniform(-1, 1, size=(n_clutter, 2))
    feats += rng.normal(0, noise, size=feats.shape)
    return FeatureStack(feats), 1 + instructed, positions[instructed]
