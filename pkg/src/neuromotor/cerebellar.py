"""Cerebellar tier: proprioceptive GRU, gated FiLM, iterative refinement, reflex.

Shapes carry an optional leading batch axis: a history window is
``[B, H, D_s]``, a semantic latent ``[B, K, D]``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Node
from .plant import N_JOINTS, STATE_DIM, PlantState


class HistoryNotWarm(RuntimeError):
    """The history buffer holds fewer samples than the estimator needs."""


@dataclass
class StateVector:
    joint_angles: np.ndarray
    joint_velocities: np.ndarray
    wrench: np.ndarray
    gripper: float

    def __post_init__(self):
        if not 0.0 <= self.gripper <= 1.0:
            raise ValueError(f"gripper aperture must lie in [0, 1], got {self.gripper}")
        if len(self.joint_angles) != len(self.joint_velocities) or len(self.wrench) != 6:
            raise DimensionError("inconsistent state vector layout")

    @classmethod
    def from_plant(cls, s: PlantState) -> "StateVector":
        return cls(s.joints.copy(), s.joint_velocities.copy(), s.wrench.copy(), float(s.gripper))

    def as_array(self) -> np.ndarray:
        v = np.concatenate([self.joint_angles, self.joint_velocities, self.wrench, [self.gripper]])
        if not np.isfinite(v).all():
            raise ValueError("state vector is not finite")
        return v


# joints rad, velocities rad/s, wrench N / N.m, gripper
DEFAULT_STATE_SCALE = np.concatenate([np.full(N_JOINTS, 0.2), np.full(N_JOINTS, 0.5), np.full(6, 20.0), [1.0]])
# channels that hold positions (joint angles, gripper aperture)
POSITION_CHANNELS = np.r_[0:N_JOINTS, STATE_DIM - 1]
# per-tick increments of the position channels (window_encoding="increment")
INCREMENT_SCALE = np.concatenate([np.full(N_JOINTS, 0.01), [1.0]])
WINDOW_ENCODINGS = ("absolute", "increment")


class StateHistory:
    """Ring buffers of the last ``horizon`` states and recent wrench samples.

    States arrive once per control tick; wrench samples arrive ``substeps``
    times per tick and feed the reflex detector.
    """

    def __init__(self, horizon: int = 10, wrench_capacity: int = 64):
        if horizon < 1:
            raise ContractError("horizon must be >= 1")
        self.horizon = horizon
        self.states: deque = deque(maxlen=horizon)
        self.wrench: deque = deque(maxlen=wrench_capacity)

    def push(self, state: np.ndarray, wrench_samples=None) -> None:
        state = np.asarray(state, dtype=float)
        if state.shape != (STATE_DIM,):
            raise DimensionError(f"state must have {STATE_DIM} entries, got {state.shape}")
        self.states.append(state)
        if wrench_samples is not None:
            for w in np.atleast_2d(wrench_samples):
                self.wrench.append(np.asarray(w, dtype=float))

    def push_plant(self, s: PlantState) -> None:
        self.push(s.state_vector(), s.wrench_samples)

    def prefill(self, s: PlantState) -> None:
        """Fill both buffers with copies of ``s`` so the history starts warm."""
        while len(self.states) < self.horizon:
            self.states.append(s.state_vector())
        while len(self.wrench) < self.wrench.maxlen:
            self.wrench.append(s.wrench.copy())

    @property
    def warm(self) -> bool:
        return len(self.states) == self.horizon

    def window(self) -> np.ndarray:
        if not self.warm:
            raise HistoryNotWarm(f"history holds {len(self.states)} of {self.horizon} states")
        return np.array(self.states)

    def wrench_window(self, n: int) -> np.ndarray:
        if len(self.wrench) < n:
            raise HistoryNotWarm(f"need {n} wrench samples, have {len(self.wrench)}")
        return np.array(list(self.wrench)[-n:])

    def snapshot(self) -> "StateHistory":
        other = StateHistory(self.horizon, self.wrench.maxlen)
        other.states.extend(s.copy() for s in self.states)
        other.wrench.extend(w.copy() for w in self.wrench)
        return other


# ---------------------------------------------------------------- parameters


def _linear(rng, n_in, n_out, gain=1.0):
    return ad.parameter(rng.normal(0.0, gain / math.sqrt(n_in), (n_in, n_out)))


class GruEstimator:
    """GRU with update gate ``z``, reset gate ``r`` and candidate ``c``::

        z = sig(x Wz + h Uz + bz)      r = sig(x Wr + h Ur + br)
        c = tanh(x Wc + (r*h) Uc + bc) h' = (1 - z) * h + z * c
    """

    def __init__(self, d_in: int = STATE_DIM, d_hidden: int = 64, seed: int = 0, prefix: str = "gru", bias: bool = True):
        rng = np.random.default_rng(seed)
        self.d_in, self.d_hidden, self.prefix = d_in, d_hidden, prefix
        self.params = {
            f"{prefix}.w_x": _linear(rng, d_in, 3 * d_hidden),
            f"{prefix}.u_zr": _linear(rng, d_hidden, 2 * d_hidden),
            f"{prefix}.u_c": _linear(rng, d_hidden, d_hidden),
        }
        if bias:
            self.params[f"{prefix}.b"] = ad.parameter(np.zeros(3 * d_hidden))

    def p(self, name):
        return self.params[f"{self.prefix}.{name}"]

    def input_projection(self, x: Node) -> Node:
        xw = x @ self.p("w_x")
        b = self.params.get(f"{self.prefix}.b")
        return xw if b is None else xw + b

    def fold(self, xw: Node) -> Node:
        """Run the recurrence over pre-projected inputs ``[..., H, 3*D_h]``."""
        n = self.d_hidden
        steps = xw.shape[-2]
        h = None
        for t in range(steps):
            x_t = xw[..., t, :]
            if h is None:  # zero initial hidden state
                zr = ad.sigmoid(x_t[..., : 2 * n])
                z = zr[..., :n]
                c = ad.tanh(x_t[..., 2 * n :])
                h = z * c
                continue
            zr = ad.sigmoid(x_t[..., : 2 * n] + h @ self.p("u_zr"))
            z, r = zr[..., :n], zr[..., n:]
            c = ad.tanh(x_t[..., 2 * n :] + (r * h) @ self.p("u_c"))
            h = h + z * (c - h)
        return h


# float64 sigmoid is still strictly inside (0, 1) at this pre-activation
GATE_LIMIT = 36.0


class FilmModulator:
    """Gated FiLM: ``z_mod = (1 + gamma) * (z_sem * g) + beta``.

    ``gate_mode`` is ``channel`` (one gate per latent channel), ``scalar``,
    or ``open`` (g fixed to 1).  gamma, beta and the gate are per channel and
    broadcast across the K tokens.
    """

    def __init__(
        self,
        d_hidden: int = 64,
        D: int = 32,
        proj_dim: int = 32,
        gate_mode: str = "channel",
        seed: int = 0,
        prefix: str = "film",
        bias: bool = True,
    ):
        if gate_mode not in ("channel", "scalar", "open"):
            raise ContractError(f"unknown gate mode {gate_mode!r}")
        rng = np.random.default_rng(seed)
        self.D, self.gate_mode, self.prefix = D, gate_mode, prefix
        gate_dim = 1 if gate_mode == "scalar" else D
        self.params = {
            f"{prefix}.proj_w": _linear(rng, d_hidden, proj_dim),
            f"{prefix}.w_gate": ad.parameter(np.zeros((proj_dim, gate_dim))),
            # zero heads: modulation starts as the identity up to the gate
            f"{prefix}.gamma_w": ad.parameter(np.zeros((d_hidden, D))),
            f"{prefix}.beta_w": ad.parameter(np.zeros((d_hidden, D))),
        }
        if bias:
            self.params[f"{prefix}.proj_b"] = ad.parameter(np.zeros(proj_dim))
            self.params[f"{prefix}.gamma_b"] = ad.parameter(np.zeros(D))
            self.params[f"{prefix}.beta_b"] = ad.parameter(np.zeros(D))

    def p(self, name):
        return self.params[f"{self.prefix}.{name}"]

    def _affine(self, h: Node, w: str, b: str) -> Node:
        out = h @ self.p(w)
        bias = self.params.get(f"{self.prefix}.{b}")
        return out if bias is None else out + bias

    def gate(self, h: Node) -> Node:
        if self.gate_mode == "open":
            return ad.constant(np.ones(h.shape[:-1] + (1,)))
        pre = self._affine(h, "proj_w", "proj_b") @ self.p("w_gate")
        return ad.sigmoid(ad.clip(pre, -GATE_LIMIT, GATE_LIMIT))

    def heads(self, h: Node) -> tuple[Node, Node]:
        return self._affine(h, "gamma_w", "gamma_b"), self._affine(h, "beta_w", "beta_b")


def film(z_sem, gate, gamma, beta) -> Node:
    """The modulation formula with gate/gamma/beta broadcast over tokens."""
    z_sem, gate, gamma, beta = (ad.as_node(x) for x in (z_sem, gate, gamma, beta))
    if z_sem.value.ndim == gamma.value.ndim + 1:
        expand = lambda x: ad.reshape(x, x.shape[:-1] + (1, x.shape[-1]))  # noqa: E731
        gate, gamma, beta = expand(gate), expand(gamma), expand(beta)
    return (gamma + 1.0) * (z_sem * gate) + beta


@dataclass(frozen=True)
class ReflexConfig:
    force_window: int = 20
    zscore_k: float = 4.0
    floor: float = 2.0  # N
    retraction_gain: float = 0.01  # m per tick
    retraction_ticks: int = 5

    def __post_init__(self):
        if self.zscore_k <= 0:
            raise ContractError("zscore_k must be positive")
        if self.retraction_ticks < 1:
            raise ContractError("retraction_ticks must be >= 1")
        if self.force_window < 2:
            raise ContractError("force_window must be >= 2")


class CerebellarModule:
    def __init__(
        self,
        K: int = 8,
        D: int = 32,
        d_hidden: int = 64,
        proj_dim: int = 32,
        gate_mode: str = "channel",
        refine_cycles: int = 2,
        state_scale=DEFAULT_STATE_SCALE,
        seed: int = 0,
        bias: bool = True,
        window_encoding: str = "absolute",
    ):
        if window_encoding not in WINDOW_ENCODINGS:
            raise ContractError(f"unknown window encoding {window_encoding!r}")
        self.K, self.D = K, D
        self.refine_cycles = refine_cycles
        self.state_scale = np.asarray(state_scale, dtype=float)
        self.window_encoding = window_encoding
        self.gru = GruEstimator(STATE_DIM, d_hidden, seed=seed, bias=bias)
        self.film = FilmModulator(d_hidden, D, proj_dim, gate_mode, seed=seed + 1, bias=bias)
        self.params = {
            **self.gru.params,
            **self.film.params,
            # predicts the change of the (normalised) state over the next tick
            "forward_model.w": ad.parameter(np.zeros((d_hidden + K * D, STATE_DIM))),
        }
        if bias:
            self.params["forward_model.b"] = ad.parameter(np.zeros(STATE_DIM))

    def normalise(self, window) -> np.ndarray:
        """Raw window ``[..., H, D_s]`` to estimator input.

        With ``increment`` encoding the position channels carry the change
        since the previous sample (zero for the oldest one), so a resting
        arm maps to an all-zero window wherever it rests.
        """
        w = np.asarray(window, dtype=float) / self.state_scale
        if self.window_encoding == "increment":
            raw = np.asarray(window, dtype=float)[..., POSITION_CHANNELS]
            inc = np.zeros_like(raw)
            inc[..., 1:, :] = np.diff(raw, axis=-2)
            w[..., POSITION_CHANNELS] = inc / INCREMENT_SCALE
        return w

    def normalise_next(self, next_state, last_state) -> np.ndarray:
        """Encoded next state, the forward model's target."""
        nxt = np.asarray(next_state, dtype=float)
        out = nxt / self.state_scale
        if self.window_encoding == "increment":
            delta = nxt[..., POSITION_CHANNELS] - np.asarray(last_state, dtype=float)[..., POSITION_CHANNELS]
            out[..., POSITION_CHANNELS] = delta / INCREMENT_SCALE
        return out

    def forward_model(self, h: Node, z_mod: Node, last_state: Node) -> Node:
        flat = ad.reshape(z_mod, z_mod.shape[:-2] + (self.K * self.D,))
        features = ad.concat([h, flat], axis=-1)
        out = last_state + features @ self.params["forward_model.w"]
        b = self.params.get("forward_model.b")
        return out if b is None else out + b


def _window_node(cereb: CerebellarModule, hist) -> Node:
    if isinstance(hist, StateHistory):
        return ad.constant(cereb.normalise(hist.window()))
    return ad.as_node(hist)


def estimate_context(cereb: CerebellarModule, hist) -> Node:
    """``h_t``: final GRU hidden state over the window, from a zero start.

    ``hist`` is a :class:`StateHistory` (normalised here) or an already
    normalised window ``[..., H, D_s]``.
    """
    x = _window_node(cereb, hist)
    return cereb.gru.fold(cereb.gru.input_projection(x))


def modulate(film_mod: FilmModulator, z_sem, h: Node) -> Node:
    z_sem = ad.as_node(z_sem)
    if z_sem.shape[-1] != film_mod.D:
        raise DimensionError(f"latent width {z_sem.shape[-1]} != FiLM width {film_mod.D}")
    gamma, beta = film_mod.heads(h)
    return film(z_sem, film_mod.gate(h), gamma, beta)


@dataclass
class RefineResult:
    z_mod: Node
    context: Node
    predicted_state: Node | None  # first anticipated next state, if any


def refine(cereb: CerebellarModule, z_sem, hist, K: int | None = None, forward_model: Callable | None = None) -> RefineResult:
    """K cycles of modulate -> anticipate next state -> re-estimate context.

    With ``K == 1`` this is a single :func:`modulate`.  ``forward_model``
    defaults to the module's learned head and is called as
    ``forward_model(h, z_mod, last_state)``.
    """
    K = cereb.refine_cycles if K is None else K
    if K < 1:
        raise ContractError(f"refinement needs K >= 1, got {K}")
    fm = forward_model or cereb.forward_model
    window = _window_node(cereb, hist)
    xw = cereb.gru.input_projection(window)
    h = cereb.gru.fold(xw)
    context = h
    predicted = None
    z_mod = None
    for k in range(K):
        z_mod = modulate(cereb.film, z_sem, h)
        if k == K - 1:
            break
        last = window[..., -1, :]
        s_next = fm(h, z_mod, last)
        if predicted is None:
            predicted = s_next
        s_next = ad.reshape(s_next, s_next.shape[:-1] + (1, s_next.shape[-1]))
        window = ad.concat([window[..., 1:, :], s_next], axis=-2)
        xw = ad.concat([xw[..., 1:, :], cereb.gru.input_projection(s_next)], axis=-2)
        h = cereb.gru.fold(xw)
    return RefineResult(z_mod, context, predicted)


# --------------------------------------------------------------------- reflex


def reflex_check(hist: StateHistory, cfg: ReflexConfig = ReflexConfig()) -> np.ndarray | None:
    """Retraction command if the newest force sample is out of band, else None.

    Each force channel is compared against the mean and (population) std of
    the preceding ``force_window`` samples.  The retraction moves along the
    measured contact force, i.e. out of the obstacle the force pushes from.
    """
    w = hist.wrench_window(cfg.force_window + 1)[:, :3]
    past, newest = w[:-1], w[-1]
    mu = past.mean(axis=0)
    sigma = past.std(axis=0)
    if not np.any(np.abs(newest - mu) > cfg.zscore_k * sigma + cfg.floor):
        return None
    norm = float(np.linalg.norm(newest))
    action = np.zeros(7)
    if norm > 0.0:
        action[:3] = cfg.retraction_gain * newest / norm
    action[6] = hist.states[-1][-1] if hist.states else 1.0
    return action


class ReflexArc:
    """Sensor-rate reflex loop with a retraction countdown."""

    def __init__(self, cfg: ReflexConfig = ReflexConfig()):
        self.cfg = cfg
        self.active: np.ndarray | None = None
        self.remaining = 0

    def reset(self) -> None:
        self.active, self.remaining = None, 0

    def __call__(self, hist: StateHistory, new_samples: int = 1) -> np.ndarray | None:
        """Check each of the newest ``new_samples`` wrench samples in order."""
        if self.remaining == 0:
            samples = list(hist.wrench)
            n = len(samples)
            for k in range(new_samples, 0, -1):
                view = StateHistory(hist.horizon, hist.wrench.maxlen)
                view.states = hist.states
                view.wrench.extend(samples[: n - k + 1])
                if len(view.wrench) < self.cfg.force_window + 1:
                    continue
                cmd = reflex_check(view, self.cfg)
                if cmd is not None:
                    self.active, self.remaining = cmd, self.cfg.retraction_ticks
                    break
        if self.remaining > 0:
            self.remaining -= 1
            return self.active.copy()
        return None
