"""Stateful leaky integrate-and-fire layers.

Membrane update, applied per simulation timestep::

    u[t] = beta * u[t-1] + I[t] - s[t-1] * theta
    s[t] = 1 if u[t] >= theta else 0

The soft reset subtracts ``theta`` one step *after* the spike (``delayed_soft``).
``immediate_soft`` subtracts at spike time instead and is kept for comparison.
State is never re-initialised between control steps unless the caller asks for
it with :func:`reset_state`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Node

RESET_MODES = ("delayed_soft", "immediate_soft")


@dataclass(frozen=True)
class LifConfig:
    beta: float = 0.9
    theta: float = 1.0
    window: int = 4
    reset_mode: str = "delayed_soft"
    surrogate_scale: float = 1.0
    # replace the Heaviside forward by the smooth fast sigmoid (gradient checks)
    smooth_reference: bool = False

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ContractError(f"beta must lie in (0, 1), got {self.beta}")
        if self.theta <= 0.0:
            raise ContractError(f"theta must be positive, got {self.theta}")
        if int(self.window) != self.window or self.window < 1:
            raise ContractError(f"window must be an integer >= 1, got {self.window}")
        if self.reset_mode not in RESET_MODES:
            raise ContractError(f"reset_mode must be one of {RESET_MODES}")
        if self.surrogate_scale <= 0.0:
            raise ContractError("surrogate_scale must be positive")


@dataclass
class MembraneState:
    u: Node
    s_prev: Node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.u.shape

    def detach(self) -> "MembraneState":
        """Same values, cut from the graph (truncated BPTT boundary)."""
        return MembraneState(ad.constant(self.u.value), ad.constant(self.s_prev.value))


def reset_state(n: int, batch: int | None = None) -> MembraneState:
    """Resting state: ``u = 0`` and no previous spikes."""
    if int(n) != n or n < 1:
        raise ContractError(f"need at least one neuron, got n={n}")
    shape = (int(n),) if batch is None else (int(batch), int(n))
    return MembraneState(ad.constant(np.zeros(shape)), ad.constant(np.zeros(shape)))


def _fire(u: Node, cfg: LifConfig) -> Node:
    if cfg.smooth_reference:
        return ad.fast_sigmoid(u, cfg.theta, cfg.surrogate_scale)
    return ad.spike(u, cfg.theta, cfg.surrogate_scale)


def lif_step(state: MembraneState, input_current, cfg: LifConfig) -> tuple[Node, MembraneState]:
    """Advance one timestep; ``input_current`` is the weighted synaptic sum."""
    current = ad.as_node(input_current)
    if current.shape != state.u.shape:
        raise DimensionError(f"current shape {current.shape} != membrane shape {state.u.shape}")
    if cfg.reset_mode == "delayed_soft":
        u = state.u * cfg.beta + current - state.s_prev * cfg.theta
        s = _fire(u, cfg)
    else:
        v = state.u * cfg.beta + current
        s = _fire(v, cfg)
        u = v - s * cfg.theta
    return s, MembraneState(u, s)


def lif_window(state: MembraneState, currents, cfg: LifConfig) -> tuple[Node, MembraneState]:
    """Fold :func:`lif_step` over the leading (time) axis of ``currents``.

    Returns the stacked spikes ``[T, ...]`` and the state to carry into the
    next control step.
    """
    currents = ad.as_node(currents)
    if currents.shape[0] != cfg.window:
        raise DimensionError(f"expected {cfg.window} timesteps, got {currents.shape[0]}")
    spikes = []
    for t in range(cfg.window):
        s, state = lif_step(state, currents[t], cfg)
        spikes.append(s)
    return ad.stack(spikes, axis=0), state
