"""Kinematic end-effector plant, contact model and task suite.

The plant integrates per-tick pose deltas (no inertia).  Joint angles are a
fixed linear function of the pose so a proprioceptive state vector has the
usual layout: joint angles, joint velocities, 6-D wrench, gripper aperture.
Contact with a plane obstacle is a linear spring; the wrench is sampled
``substeps`` times per control tick for the reflex path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

ACTION_DIMS = ("dx", "dy", "dz", "droll", "dpitch", "dyaw", "gripper")
POSE_DIMS = 6
N_JOINTS = 6
STATE_DIM = 2 * N_JOINTS + 7
TASK_KINDS = (
    "reach",
    "static_hold",
    "shake",
    "static_pose_dynamic_gripper",
    "collision_course",
    "delayed_cue",
)

# fixed synthetic inverse kinematics: joints = IK @ pose
IK = np.eye(N_JOINTS) + 0.25 * np.tril(np.ones((N_JOINTS, N_JOINTS)), -1)


@dataclass(frozen=True)
class PlantConfig:
    dt: float = 0.02  # 50 Hz control tick
    substeps: int = 4  # wrench samples per tick
    max_translation: float = 0.05  # m per tick
    max_rotation: float = 0.1  # rad per tick
    max_penetration: float = 0.005  # m
    contact_noise: float = 0.1  # N, only while in contact
    workspace: float = 0.5  # |x|, |y|, |z| bound in m


@dataclass(frozen=True)
class Obstacle:
    point: tuple[float, float, float]
    normal: tuple[float, float, float]
    stiffness: float = 1e4

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if not math.isclose(float(np.linalg.norm(n)), 1.0, rel_tol=1e-9):
            raise ValueError(f"obstacle normal must be unit length, got {self.normal}")

    def penetration(self, position: np.ndarray) -> float:
        """Depth of ``position`` behind the plane (0 on the free side)."""
        d = -float(np.dot(np.asarray(position) - np.asarray(self.point), self.normal))
        return max(d, 0.0)


@dataclass
class PlantState:
    ee_pose: np.ndarray
    gripper: float
    joints: np.ndarray
    joint_velocities: np.ndarray
    wrench: np.ndarray
    wrench_samples: np.ndarray  # [substeps, 6]
    t: int = 0

    def state_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.joints, self.joint_velocities, self.wrench, [self.gripper]]
        )

    def copy(self) -> "PlantState":
        return PlantState(
            self.ee_pose.copy(),
            float(self.gripper),
            self.joints.copy(),
            self.joint_velocities.copy(),
            self.wrench.copy(),
            self.wrench_samples.copy(),
            self.t,
        )


def initial_state(pose=None, gripper: float = 1.0, cfg: PlantConfig = PlantConfig()) -> PlantState:
    pose = np.zeros(POSE_DIMS) if pose is None else np.asarray(pose, dtype=float).copy()
    return PlantState(
        ee_pose=pose,
        gripper=float(gripper),
        joints=IK @ pose,
        joint_velocities=np.zeros(N_JOINTS),
        wrench=np.zeros(6),
        wrench_samples=np.zeros((cfg.substeps, 6)),
        t=0,
    )


def clamp_action(action, cfg: PlantConfig = PlantConfig()) -> np.ndarray:
    a = np.asarray(action, dtype=float).copy()
    if a.shape != (7,):
        raise ValueError(f"action must have 7 entries, got shape {a.shape}")
    a[:3] = np.clip(a[:3], -cfg.max_translation, cfg.max_translation)
    a[3:6] = np.clip(a[3:6], -cfg.max_rotation, cfg.max_rotation)
    a[6] = min(max(a[6], 0.0), 1.0)
    return a


def step(
    state: PlantState,
    action,
    obstacles: Sequence[Obstacle] = (),
    cfg: PlantConfig = PlantConfig(),
    rng: np.random.Generator | None = None,
) -> PlantState:
    """Integrate one control tick.

    Penetration into an obstacle is capped at ``cfg.max_penetration``; while
    penetrating, the wrench is ``stiffness * depth * normal`` plus seeded
    noise.  In free space the wrench is exactly zero.
    """
    a = clamp_action(action, cfg)
    start = state.ee_pose
    target = start + a[:6]
    samples = np.zeros((cfg.substeps, 6))
    pose = start.copy()
    for k in range(cfg.substeps):
        frac = (k + 1) / cfg.substeps
        pose = start + frac * (target - start)
        force = np.zeros(3)
        for obs in obstacles:
            n = np.asarray(obs.normal, dtype=float)
            d = obs.penetration(pose[:3])
            if d > cfg.max_penetration:
                pose[:3] += (d - cfg.max_penetration) * n  # motion along -normal is blocked
                d = cfg.max_penetration
            if d > 0.0:
                force += obs.stiffness * d * n
        if np.any(force != 0.0) and cfg.contact_noise > 0.0 and rng is not None:
            force = force + rng.normal(0.0, cfg.contact_noise, 3)
        samples[k, :3] = force
    pose[:3] = np.clip(pose[:3], -cfg.workspace, cfg.workspace)
    joints = IK @ pose
    return PlantState(
        ee_pose=pose,
        gripper=float(a[6]),
        joints=joints,
        joint_velocities=(joints - state.joints) / cfg.dt,
        wrench=samples[-1].copy(),
        wrench_samples=samples,
        t=state.t + 1,
    )


class Plant:
    """Stateful wrapper: one plant per episode."""

    def __init__(self, state: PlantState, obstacles: Sequence[Obstacle] = (), cfg: PlantConfig = PlantConfig(), seed: int = 0):
        self.state = state
        self.obstacles = tuple(obstacles)
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)

    def step(self, action) -> PlantState:
        self.state = step(self.state, action, self.obstacles, self.cfg, self.rng)
        return self.state


# ------------------------------------------------------------------------ tasks


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    episode_ticks: int = 40
    start_pose: tuple | None = None  # sampled when None
    target: tuple | None = None  # reach goal pose, sampled when None
    pre_hold: int = 5
    duration: int = 25  # reach / active phase length in ticks
    gripper: float = 1.0
    shake_amplitude: float = 0.05  # rad
    shake_period: int = 12  # ticks
    shake_cycles: int = 3
    shake_axis: int = 5  # yaw
    gripper_period: int = 8  # ticks, square wave
    approach_speed: float = 0.004  # m per tick, collision course
    obstacle: Obstacle | None = None
    cue: int | None = None  # +1 / -1, sampled when None
    cue_lag: int = 10  # ticks between cue and query
    noise_sigma: float = 0.0  # tremor on the cortical latent

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.episode_ticks < 1:
            raise ValueError("episode_ticks must be positive")
        if self.kind == "shake" and self.pre_hold + self.shake_cycles * self.shake_period > self.episode_ticks:
            raise ValueError("shake does not fit in the episode")
        if self.kind == "delayed_cue" and self.pre_hold + self.cue_lag >= self.episode_ticks:
            raise ValueError("query tick falls outside the episode")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def active_window(self) -> tuple[int, int]:
        """Tick range [start, stop) in which the expert moves."""
        if self.kind == "shake":
            return self.pre_hold, self.pre_hold + self.shake_cycles * self.shake_period
        if self.kind == "delayed_cue":
            q = self.pre_hold + self.cue_lag
            return q, q + 1
        if self.kind == "static_hold":
            return 0, 0
        if self.kind == "collision_course":
            return self.pre_hold, self.episode_ticks
        return self.pre_hold, self.pre_hold + self.duration

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if self.obstacle is not None:
            d["obstacle"] = {
                "point": list(self.obstacle.point),
                "normal": list(self.obstacle.normal),
                "stiffness": self.obstacle.stiffness,
            }
        for k in ("start_pose", "target"):
            if d[k] is not None:
                d[k] = [float(x) for x in d[k]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        if d.get("obstacle") is not None:
            o = d["obstacle"]
            d["obstacle"] = Obstacle(tuple(o["point"]), tuple(o["normal"]), o.get("stiffness", 1e4))
        for k in ("start_pose", "target"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def sample_task(template: TaskSpec, rng: np.random.Generator) -> TaskSpec:
    """Fill in the unspecified (``None``) fields of ``template``."""
    start = template.start_pose
    if start is None:
        start = tuple(np.concatenate([rng.uniform(-0.1, 0.1, 3), rng.uniform(-0.1, 0.1, 3)]))
    changes: dict = {"start_pose": start}
    if template.kind == "reach" and template.target is None:
        offset = np.concatenate([rng.uniform(-0.1, 0.1, 3), rng.uniform(-0.15, 0.15, 3)])
        changes["target"] = tuple(np.asarray(start) + offset)
    if template.kind == "delayed_cue" and template.cue is None:
        changes["cue"] = int(rng.choice([-1, 1]))
    if template.kind == "collision_course" and template.obstacle is None:
        # wall ahead in +x, normal pointing back toward the robot
        x_wall = start[0] + template.approach_speed * (template.duration + 0.5)
        changes["obstacle"] = Obstacle((x_wall, 0.0, 0.0), (-1.0, 0.0, 0.0))
    return replace(template, **changes)


def min_jerk_fraction(s: float) -> float:
    s = min(max(s, 0.0), 1.0)
    return s**3 * (10.0 - 15.0 * s + 6.0 * s * s)


def expert_action(task: TaskSpec, state: PlantState, cfg: PlantConfig = PlantConfig(), sustain: bool = False) -> np.ndarray:
    """Scripted demonstrator action for ``task`` at ``state.t``.

    ``sustain`` keeps a shake going past its last cycle, as a demonstrator
    following a frozen shake intent would.
    """
    a = np.zeros(7)
    a[6] = state.gripper
    t = state.t
    start, stop = task.active_window
    active = start <= t < stop
    if sustain and task.kind == "shake":
        active = t >= start
    if task.kind == "reach":
        if task.target is None:
            raise ValueError("reach task needs a target; use sample_task")
        remaining = np.asarray(task.target) - state.ee_pose
        if active and np.any(np.abs(remaining) > 1e-12):
            s0 = (t - start) / task.duration
            s1 = (t + 1 - start) / task.duration
            p0, p1 = min_jerk_fraction(s0), min_jerk_fraction(s1)
            a[:6] = remaining * (p1 - p0) / (1.0 - p0)
        a[6] = task.gripper
    elif task.kind == "shake":
        if active:
            omega = 2.0 * math.pi / (task.shake_period * cfg.dt)
            phase = omega * (t - start) * cfg.dt
            a[task.shake_axis] = task.shake_amplitude * omega * cfg.dt * math.sin(phase)
        a[6] = task.gripper
    elif task.kind == "static_pose_dynamic_gripper":
        if active:
            half = task.gripper_period // 2
            a[6] = 1.0 if ((t - start) // half) % 2 == 0 else 0.0
    elif task.kind == "collision_course":
        if active:
            n = np.asarray(task.obstacle.normal) if task.obstacle is not None else np.array([-1.0, 0, 0])
            a[:3] = -task.approach_speed * n
        a[6] = task.gripper
    elif task.kind == "delayed_cue":
        if active:
            a[0] = 0.01 * task.cue
        a[6] = task.gripper
    elif task.kind == "static_hold":
        a[6] = task.gripper
    return a


def phase_label(task: TaskSpec, t: int) -> str:
    start, stop = task.active_window
    if not start <= t < stop:
        return "static_hold"
    if task.kind == "static_pose_dynamic_gripper":
        return "gripper"
    return "dynamic"


def tremor_inject(stream, sigma: float, seed: int) -> np.ndarray:
    """Add iid zero-mean Gaussian jitter to every entry of ``stream``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = np.asarray(stream, dtype=float)
    if sigma == 0:
        return x.copy()
    rng = np.random.default_rng(seed)
    return x + rng.normal(0.0, sigma, size=x.shape)


class TremorSource:
    """Tick-by-tick version of :func:`tremor_inject` with the same draws."""

    def __init__(self, sigma: float, seed: int):
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        self.sigma = sigma
        self.rng = np.random.default_rng(seed)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.sigma == 0:
            return np.asarray(x, dtype=float).copy()
        return x + self.rng.normal(0.0, self.sigma, size=np.shape(x))


def smoothness_metrics(actions) -> dict:
    """Mean absolute commanded acceleration and jerk per pose dimension.

    Per-tick deltas are treated as commanded velocity, so acceleration is
    their first difference and jerk the second.
    """
    a = np.asarray(actions, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[0] < 3:
        raise ValueError(f"need at least 3 commands, got {a.shape[0]}")
    v = a[:, :POSE_DIMS]
    acc = np.diff(v, axis=0)
    jerk = np.diff(acc, axis=0)
    return {"maca": np.abs(acc).mean(axis=0), "maj": np.abs(jerk).mean(axis=0)}


def count_cycles(signal, min_prominence: float) -> np.ndarray:
    """Indices of oscillation peaks with at least ``min_prominence``."""
    from scipy.signal import find_peaks

    peaks, _ = find_peaks(np.asarray(signal, dtype=float), prominence=min_prominence)
    return peaks


def autocorrelation_period(signal, min_lag: int = 2) -> int:
    """Lag of the first autocorrelation peak after lag 0."""
    x = np.asarray(signal, dtype=float)
    x = x - x.mean()
    n = len(x)
    ac = np.array([np.dot(x[: n - k], x[k:]) for k in range(n)])
    for k in range(max(min_lag, 1), n - 1):
        if ac[k] >= ac[k - 1] and ac[k] > ac[k + 1] and ac[k] > 0:
            return k
    raise ValueError("no autocorrelation peak found")


@dataclass
class Episode:
    """A recorded rollout; ``states[t]`` is observed before ``actions[t]``."""

    task: TaskSpec
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    phases: list = field(default_factory=list)

    def poses(self) -> np.ndarray:
        return np.array([s.ee_pose for s in self.states])


def rollout_expert(task: TaskSpec, cfg: PlantConfig = PlantConfig(), seed: int = 0) -> Episode:
    state = initial_state(task.start_pose, task.gripper, cfg)
    plant = Plant(state, [task.obstacle] if task.obstacle else [], cfg, seed)
    ep = Episode(task)
    for t in range(task.episode_ticks):
        a = clamp_action(expert_action(task, plant.state, cfg), cfg)
        ep.states.append(plant.state)
        ep.actions.append(a)
        ep.phases.append(phase_label(task, t))
        plant.step(a)
    ep.states.append(plant.state)
    return ep


def episode_rows(ep: Episode) -> list[list]:
    """CSV rows: tick, pose, wrench, action, phase."""
    rows = []
    for t, (s, a, ph) in enumerate(zip(ep.states, ep.actions, ep.phases)):
        rows.append([t, *s.ee_pose.tolist(), *s.wrench.tolist(), *a.tolist(), ph])
    return rows


EPISODE_HEADER = (
    ["tick", "x", "y", "z", "roll", "pitch", "yaw"]
    + ["Fx", "Fy", "Fz", "Tx", "Ty", "Tz"]
    + list(ACTION_DIMS)
    + ["phase"]
)
