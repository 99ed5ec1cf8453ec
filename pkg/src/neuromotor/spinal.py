"""Spiking spinal decoder.

``z_mod`` is flattened, projected to analog currents and injected for ``T``
timesteps into a stack of stateful LIF layers with residual connections::

    x0[t]    = LIF_0(W_in z)
    x_l+1[t] = x_l[t] + LIF_l(x_l[t] W_l + b_l)
    u_out[t] = beta_out * u_out[t-1] + x_L[t] W_out

Output neurons integrate without reset over the window; the action is
``u_out / T + b_out`` at the last timestep (``readout="last"``) or averaged over
the window (``readout="mean"``).  Hidden membranes persist across control
steps; ``u_out`` restarts at zero every control step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Node
from .lif import LifConfig, MembraneState, lif_step, reset_state

ACTION_SIZE = 7


class SpinalNet:
    def __init__(
        self,
        d_in: int = 256,
        n_hidden: int = 128,
        n_blocks: int = 2,
        beta_out: float = 1.0,
        readout: str = "last",
        input_gain: float = 4.0,
        block_gain: float = 1.0,
        n_probe: int = 8,
        seed: int = 0,
        block_bias: bool = True,
    ):
        if readout not in ("last", "mean"):
            raise ContractError(f"unknown readout {readout!r}")
        if not 0.0 < beta_out <= 1.0:
            raise ContractError("beta_out must lie in (0, 1]")
        rng = np.random.default_rng(seed)
        self.d_in, self.n_hidden, self.n_blocks = d_in, n_hidden, n_blocks
        self.beta_out, self.readout = beta_out, readout
        self.n_probe = min(n_probe, n_hidden)
        self.params = {
            "spinal.w_in": ad.parameter(rng.normal(0, input_gain / math.sqrt(d_in), (d_in, n_hidden))),
        }
        for b in range(n_blocks):
            self.params[f"spinal.block{b}.w"] = ad.parameter(rng.normal(0, block_gain / math.sqrt(n_hidden), (n_hidden, n_hidden)))
            if block_bias:
                self.params[f"spinal.block{b}.b"] = ad.parameter(np.zeros(n_hidden))
        self.params["spinal.w_out"] = ad.parameter(rng.normal(0, 1.0 / math.sqrt(n_hidden), (n_hidden, ACTION_SIZE)))
        self.params["spinal.b_out"] = ad.parameter(np.zeros(ACTION_SIZE))
        self.state: list[MembraneState] | None = None

    @property
    def n_layers(self) -> int:
        """Number of spiking layers (input layer plus one per block)."""
        return 1 + self.n_blocks

    def fan_in(self) -> list[int]:
        return [self.d_in] + [self.n_hidden] * self.n_blocks

    def reset(self, batch: int | None = None) -> None:
        self.state = [reset_state(self.n_hidden, batch) for _ in range(self.n_layers)]

    def detach(self) -> None:
        if self.state is not None:
            self.state = [m.detach() for m in self.state]


@dataclass
class StepActivity:
    """Spike raster of one control step: ``spikes[..., layer, t, neuron]``."""

    spikes: np.ndarray
    probe_u: np.ndarray  # [..., t, probe] membrane of the first hidden layer
    readout_raw: np.ndarray  # [..., 7] W_out . spike_sum (no integrator scaling)


def spinal_forward(net: SpinalNet, z_mod, cfg: LifConfig, record: bool = True) -> tuple[Node, StepActivity | None]:
    """One control step.  Membrane state is read from and written to ``net``."""
    z_mod = ad.as_node(z_mod)
    flat_dim = z_mod.shape[-2] * z_mod.shape[-1] if z_mod.value.ndim >= 2 else z_mod.shape[-1]
    if flat_dim != net.d_in:
        raise ContractError(f"latent flattens to {flat_dim}, network expects {net.d_in}")
    batch_shape = z_mod.shape[:-2] if z_mod.value.ndim >= 2 else ()
    flat = ad.reshape(z_mod, batch_shape + (net.d_in,))
    batch = batch_shape[0] if batch_shape else None
    if net.state is None or net.state[0].u.shape != batch_shape + (net.n_hidden,):
        net.reset(batch)
    P = net.params
    current = flat @ P["spinal.w_in"]
    T = cfg.window
    u_out = None
    outputs = []
    rasters = [] if record else None
    probes = [] if record else None
    state = list(net.state)
    for t in range(T):
        s, state[0] = lif_step(state[0], current, cfg)
        layer_spikes = [s]
        x = s
        for b in range(net.n_blocks):
            drive_b = x @ P[f"spinal.block{b}.w"]
            if f"spinal.block{b}.b" in P:
                drive_b = drive_b + P[f"spinal.block{b}.b"]
            s_b, state[b + 1] = lif_step(state[b + 1], drive_b, cfg)
            layer_spikes.append(s_b)
            x = x + s_b
        drive = x @ P["spinal.w_out"]
        u_out = drive if u_out is None else u_out * net.beta_out + drive
        if net.readout == "mean":
            outputs.append(u_out)
        if record:
            rasters.append(np.stack([ls.value for ls in layer_spikes], axis=-2))
            probes.append(state[0].u.value[..., : net.n_probe])
    net.state = state
    if net.readout == "mean":
        u_final = ad.mean(ad.stack(outputs, axis=0), axis=0)
    else:
        u_final = u_out
    action = u_final * (1.0 / T) + P["spinal.b_out"]
    activity = None
    if record:
        spikes = np.stack(rasters, axis=-2)  # [..., layer, t, neuron]
        spike_sum = _stream_sum(spikes)
        activity = StepActivity(
            spikes=spikes.astype(bool) if not cfg.smooth_reference else spikes,
            probe_u=np.stack(probes, axis=-2),
            readout_raw=spike_sum @ P["spinal.w_out"].value,
        )
    return action, activity


def _stream_sum(spikes: np.ndarray) -> np.ndarray:
    """Window sum of the residual stream ``x_L`` (sum over layers of spikes)."""
    return spikes.sum(axis=(-3, -2))


# ------------------------------------------------------------------ analysis


@dataclass
class ActivityTrace:
    """Per-episode record of spinal activity, one entry per control step."""

    spikes: list = field(default_factory=list)  # each [layers, T, n]
    probe_u: list = field(default_factory=list)  # each [T, probes]
    readout_raw: list = field(default_factory=list)

    def append(self, act: StepActivity, index: int | None = None) -> None:
        pick = (lambda a: a) if index is None else (lambda a: a[index])
        self.spikes.append(np.asarray(pick(act.spikes)))
        self.probe_u.append(np.asarray(pick(act.probe_u)))
        self.readout_raw.append(np.asarray(pick(act.readout_raw)))

    def __len__(self) -> int:
        return len(self.spikes)

    @property
    def layer_rates(self) -> np.ndarray:
        """[steps, layers] mean spikes per neuron per timestep."""
        return np.array([s.mean(axis=(-2, -1)) for s in self.spikes], dtype=float)

    @property
    def step_neuron_rates(self) -> np.ndarray:
        """[steps, layers, n] per-neuron rate within each control step."""
        return np.array([s.mean(axis=-2) for s in self.spikes], dtype=float)

    @property
    def neuron_rates(self) -> np.ndarray:
        """[layers, n] per-neuron rate averaged over all steps."""
        return self.step_neuron_rates.mean(axis=0)

    def rows(self) -> list[list]:
        """CSV rows: step, layer, rate."""
        rates = self.layer_rates
        return [[t, l, float(rates[t, l])] for t in range(rates.shape[0]) for l in range(rates.shape[1])]


@dataclass
class PhaseRateSummary:
    phases: list[str]
    layer_means: dict  # phase -> [layers]
    group_means: dict  # phase -> {group: rate}
    selectivity: dict  # group -> index


SELECTIVITY_EPS = 1e-9


def firing_rate_report(
    trace: ActivityTrace,
    phase_labels,
    groups: dict | None = None,
    dynamic: str = "dynamic",
    static: str = "static_hold",
) -> PhaseRateSummary:
    """Mean rate per layer per phase and per-group selectivity.

    ``groups`` maps a name to ``(layer, neuron indices)``; by default each
    layer is one group.  Selectivity is
    ``(r_dynamic - r_static) / (r_dynamic + r_static + eps)``.
    """
    labels = list(phase_labels)
    if len(labels) != len(trace):
        raise ContractError(f"{len(labels)} labels for {len(trace)} steps")
    rates = trace.step_neuron_rates  # [steps, layers, n]
    if groups is None:
        groups = {f"layer{l}": (l, slice(None)) for l in range(rates.shape[1])}
    phases = list(dict.fromkeys(labels))
    labels_arr = np.array(labels)
    layer_means, group_means = {}, {}
    for ph in phases:
        sel = rates[labels_arr == ph]
        layer_means[ph] = sel.mean(axis=(0, 2))
        group_means[ph] = {g: float(sel[:, l, idx].mean()) for g, (l, idx) in groups.items()}
    selectivity = {}
    for g in groups:
        rd = group_means.get(dynamic, {}).get(g, 0.0)
        rs = group_means.get(static, {}).get(g, 0.0)
        selectivity[g] = (rd - rs) / (rd + rs + SELECTIVITY_EPS)
    return PhaseRateSummary(phases, layer_means, group_means, selectivity)


def dominant_dims(actions) -> np.ndarray:
    """Per step, the action dim with the largest episode-normalised magnitude.

    Steps with an all-zero action get -1.
    """
    a = np.abs(np.asarray(actions, dtype=float))
    scale = a.max(axis=0)
    norm = np.divide(a, scale, out=np.zeros_like(a), where=scale > 0)
    dom = norm.argmax(axis=1)
    dom[norm.max(axis=1) == 0] = -1
    return dom


@dataclass
class KinematicMap:
    rates: np.ndarray  # [dims, n] mean first-layer rate, NaN-free
    defined: np.ndarray  # [dims] whether any step was dominated by the dim

    def rows(self) -> list[list]:
        return [[d, n, float(self.rates[d, n])] for d in range(self.rates.shape[0]) for n in range(self.rates.shape[1])]


def neuron_kinematic_map(trace: ActivityTrace, actions) -> KinematicMap:
    """Mean first-hidden-layer firing rate conditioned on the dominant action dim."""
    actions = np.asarray(actions, dtype=float)
    if len(actions) == 0:
        raise ContractError("empty action sequence")
    if len(actions) != len(trace):
        raise ContractError(f"{len(actions)} actions for {len(trace)} steps")
    rates = trace.step_neuron_rates[:, 0, :]
    dom = dominant_dims(actions)
    dims = actions.shape[1]
    out = np.zeros((dims, rates.shape[1]))
    defined = np.zeros(dims, dtype=bool)
    for d in range(dims):
        mask = dom == d
        if mask.any():
            out[d] = rates[mask].mean(axis=0)
            defined[d] = True
    return KinematicMap(out, defined)
