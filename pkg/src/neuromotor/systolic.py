"""Cycle-level model of a spike-sparsity-aware LIF systolic array.

Columns update ``C`` output neurons in parallel, rows accumulate ``R``
timesteps in parallel.  Input neurons that stay silent for the whole window
are filtered out before they reach the array, so a layer costs::

    cycles = ceil(n_out / C) * ceil(T / R) * n_in_active

Pipeline fill and drain are not modelled; the calibration constants absorb
them.  Energy is ``cycles * energy_per_cycle``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ContractError

REPORT_NOTE = "pipeline fill/drain cycles omitted; absorbed by calibration"


@dataclass(frozen=True)
class ArrayConfig:
    rows: int = 4
    cols: int = 8
    clock_hz: float = 20e6
    energy_per_cycle: float = 0.87e-3 / 43_800  # J, calibrated
    # reported as metadata only
    resources: dict = field(default_factory=lambda: {"LUT": 51_953, "FF": 27_880, "BRAM": 169})

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ContractError("array needs at least one row and one column")
        if self.clock_hz <= 0:
            raise ContractError("clock_hz must be positive")
        if self.energy_per_cycle < 0:
            raise ContractError("energy_per_cycle must be >= 0")


@dataclass
class LayerJob:
    n_in: int
    n_out: int
    T: int
    active: np.ndarray  # [n_in] bool, True if the input spiked in the window
    name: str = ""

    def __post_init__(self):
        self.active = np.asarray(self.active, dtype=bool)
        if self.active.shape != (self.n_in,):
            raise ContractError(f"activity mask has shape {self.active.shape}, expected ({self.n_in},)")
        if self.n_out < 1 or self.T < 1:
            raise ContractError("n_out and T must be >= 1")

    @property
    def n_active(self) -> int:
        return int(self.active.sum())


def schedule(job: LayerJob, cfg: ArrayConfig) -> int:
    """Cycles for one layer, simulated tile by tile."""
    cycles = 0
    active_inputs = np.flatnonzero(job.active)
    for _col_tile in range(0, job.n_out, cfg.cols):
        for _row_tile in range(0, job.T, cfg.rows):
            # one cycle per surviving input spike vector per tile
            cycles += len(active_inputs)
    return cycles


def schedule_formula(job: LayerJob, cfg: ArrayConfig) -> int:
    return math.ceil(job.n_out / cfg.cols) * math.ceil(job.T / cfg.rows) * job.n_active


@dataclass
class CycleReport:
    layer_cycles: list[int]
    total_cycles: int
    latency_s: float
    energy_j: float
    skipped_fraction: float
    layer_names: list[str] = field(default_factory=list)
    note: str = REPORT_NOTE

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def simulate_network(jobs: list[LayerJob], cfg: ArrayConfig) -> CycleReport:
    cycles = [schedule(j, cfg) for j in jobs]
    total = sum(cycles)
    n_in = sum(j.n_in for j in jobs)
    n_active = sum(j.n_active for j in jobs)
    skipped = 1.0 - n_active / n_in if n_in else 0.0
    return CycleReport(
        layer_cycles=cycles,
        total_cycles=total,
        latency_s=total / cfg.clock_hz,
        energy_j=total * cfg.energy_per_cycle,
        skipped_fraction=skipped,
        layer_names=[j.name for j in jobs],
    )


def extract_jobs(net, trace, step: int, z_active=None) -> list:
    """Layer jobs for control step ``step`` of a recorded spinal rollout.

    The input projection sees the analog latent; an input channel counts as
    active when it is nonzero (``z_active``, default all active).  Every
    spiking layer's job uses the spikes of the layer feeding it.  The readout
    layer is included as a final job.
    """
    if not 0 <= step < len(trace):
        raise ContractError(f"step {step} outside trace of length {len(trace)}")
    spikes = np.asarray(trace.spikes[step]).astype(bool)  # [layers, T, n]
    T = spikes.shape[1]
    jobs = []
    mask_in = np.ones(net.d_in, dtype=bool) if z_active is None else np.asarray(z_active, dtype=bool)
    jobs.append(LayerJob(net.d_in, net.n_hidden, T, mask_in, "input"))
    stream = np.zeros(spikes.shape[1:], dtype=bool)
    for layer in range(net.n_layers):
        stream = stream | spikes[layer]
        if layer < net.n_blocks:
            jobs.append(LayerJob(net.n_hidden, net.n_hidden, T, stream.any(axis=0), f"block{layer}"))
    jobs.append(LayerJob(net.n_hidden, net.params["spinal.w_out"].shape[1], T, stream.any(axis=0), "readout"))
    return jobs


def calibration_jobs(T: int = 4) -> list[LayerJob]:
    """Dense reference workload used to anchor latency and energy.

    1344 -> 200 -> 200 -> 200 -> 7, every input active.  With the default
    4x8 array this is 43,800 cycles per inference.
    """
    dims = [(1344, 200), (200, 200), (200, 200), (200, 7)]
    return [LayerJob(i, o, T, np.ones(i, dtype=bool), f"layer{k}") for k, (i, o) in enumerate(dims)]


def trace_rows(reports: list[CycleReport]) -> list[list]:
    """CSV rows: step, total_cycles, latency_s, energy_j, skipped_fraction."""
    return [[t, r.total_cycles, r.latency_s, r.energy_j, r.skipped_fraction] for t, r in enumerate(reports)]
