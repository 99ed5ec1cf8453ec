"""End-to-end experiment protocols.

Each protocol runs one seed and returns a :class:`SeedResult` (metrics, a
pass flag and raw tables).  :func:`run_experiment` fans seeds out over worker
threads and folds them into a summary.  All thresholds come from the config
section of the experiment.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .config import EXPERIMENTS
from .cortical import QFormer, SceneBank, attention_rows, make_scene, qformer_distill
from .plant import EPISODE_HEADER, PlantConfig, TaskSpec, episode_rows, sample_task
from .policy import HierarchicalPolicy, ModelConfig, rollout
from .spinal import firing_rate_report
from .systolic import ArrayConfig, calibration_jobs, extract_jobs, simulate_network, trace_rows
from .trainer import (
    Adam,
    Checkpoint,
    TrainConfig,
    evaluate,
    generate_demos,
    retraction_latency,
    shake_cycles,
    train,
)


@dataclass
class Table:
    header: list
    rows: list


@dataclass
class SeedResult:
    experiment: str
    seed: int
    metrics: dict
    passed: bool
    tables: dict = field(default_factory=dict)  # file stem -> Table
    checkpoint: Checkpoint | None = None

    def record(self) -> dict:
        return {"experiment": self.experiment, "seed": self.seed, "metrics": self.metrics, "pass": self.passed}


@dataclass
class ExperimentResult:
    experiment: str
    seeds: list
    per_seed: list
    metrics: dict
    passed: bool

    def record(self) -> dict:
        return {"experiment": self.experiment, "seed": self.seeds, "metrics": self.metrics, "pass": self.passed}


# ------------------------------------------------------------------- helpers


def _model(sec: dict, seed: int, checkpoint: Checkpoint | None) -> ModelConfig:
    if checkpoint is not None:
        return checkpoint.model
    return ModelConfig.from_dict({**sec.get("model", {}), "seed": seed})


def _optim(sec: dict, seed: int) -> TrainConfig:
    return TrainConfig.from_dict({**sec.get("optim", {}), "seed": seed})


def _loss_table(curves: dict) -> Table:
    rows = [[name, epoch, float(v)] for name, curve in curves.items() for epoch, v in enumerate(curve)]
    return Table(["model", "epoch", "loss"], rows)


def _eval_seed(seed: int) -> int:
    return seed + 1000


def _rate(report: dict, phase: str) -> float:
    rates = report.get("layer_rates", {}).get(phase)
    return float(np.mean(rates)) if rates is not None else float("nan")


# ----------------------------------------------------------------- protocols


def smoothing(sec: dict, seed: int, plant: PlantConfig, checkpoint: Checkpoint | None = None) -> SeedResult:
    """Cerebellar stack vs a no-cerebellum baseline on the tremor reach task."""
    mc, tc = _model(sec, seed, checkpoint), _optim(sec, seed)
    task = TaskSpec.from_dict(sec["task"])
    demos = generate_demos([task], sec["n_demos"], seed, model_cfg=mc, plant_cfg=plant)
    models = {
        "cerebellar": checkpoint or train(demos, tc, replace(mc, no_cerebellum=False)),
        "baseline": train(demos, tc, replace(mc, no_cerebellum=True)),
    }
    metrics, rows = {}, []
    for name, ck in models.items():
        rep = evaluate(ck, [task] * sec["n_eval"], ("success", "smoothness"), seed=_eval_seed(seed), plant_cfg=plant)
        metrics[f"{name}_maj"] = float(np.mean(rep["maj"]))
        metrics[f"{name}_maca"] = float(np.mean(rep["maca"]))
        metrics[f"{name}_success_rate"] = rep["success_rate"][task.kind]
        rows += [[name, d, rep["maj"][d], rep["maca"][d]] for d in range(len(rep["maj"]))]
    metrics["maj_reduction"] = 1.0 - metrics["cerebellar_maj"] / metrics["baseline_maj"]
    metrics["maca_reduction"] = 1.0 - metrics["cerebellar_maca"] / metrics["baseline_maca"]
    th = sec["thresholds"]
    passed = metrics["maj_reduction"] >= th["maj_reduction"] and metrics["maca_reduction"] >= th["maca_reduction"]
    tables = {
        "smoothness": Table(["model", "dim", "maj", "maca"], rows),
        "loss": _loss_table({k: v.loss_curve for k, v in models.items()}),
    }
    return SeedResult("smoothing", seed, metrics, passed, tables, models["cerebellar"])


def _shake_model(sec: dict, seed: int, plant: PlantConfig, checkpoint: Checkpoint | None):
    mc, tc = _model(sec, seed, checkpoint), _optim(sec, seed)
    task = TaskSpec.from_dict(sec["task"])
    if checkpoint is not None:
        return checkpoint, task
    demos = generate_demos([task], sec["n_demos"], seed, model_cfg=mc, plant_cfg=plant, freeze_prob=sec.get("freeze_prob", 0.0))
    return train(demos, tc, mc), task


def sparsity(sec: dict, seed: int, plant: PlantConfig, checkpoint: Checkpoint | None = None) -> SeedResult:
    """Hidden firing in static-hold phases relative to dynamic phases."""
    ck, task = _shake_model(sec, seed, plant, checkpoint)
    rep = evaluate(ck, [task] * sec["n_eval"], ("firing",), seed=_eval_seed(seed), plant_cfg=plant)
    static, dynamic = _rate(rep, "static_hold"), _rate(rep, "dynamic")
    ratio = static / dynamic if dynamic > 0 else float("inf")
    metrics = {"static_rate": static, "dynamic_rate": dynamic, "rate_ratio": ratio}
    rows = [[ph, layer, float(r)] for ph, rates in rep["layer_rates"].items() for layer, r in enumerate(rates)]
    step_rows = [[e, *row] for e, r in enumerate(rep["rollouts"]) for row in r.trace.rows()]
    tables = {
        "phase_rates": Table(["phase", "layer", "rate"], rows),
        "step_rates": Table(["episode", "step", "layer", "rate"], step_rows),
        "loss": _loss_table({"policy": ck.loss_curve}),
    }
    return SeedResult("sparsity", seed, metrics, bool(ratio <= sec["thresholds"]["max_rate_ratio"]), tables, ck)


def decoupling(sec: dict, seed: int, plant: PlantConfig, checkpoint: Checkpoint | None = None) -> SeedResult:
    """Static pose with a square-wave gripper: pose holds while the gripper cycles."""
    ck, task = _shake_model(sec, seed, plant, checkpoint)
    rep = evaluate(ck, [task] * sec["n_eval"], ("success", "firing"), seed=_eval_seed(seed), plant_cfg=plant)
    drift, match, sel = [], [], []
    for r in rep["rollouts"]:
        poses = r.episode.poses()
        drift.append(float(np.linalg.norm(poses[:, :3] - poses[0, :3], axis=1).max()))
        t = r.episode.task
        start, stop = t.active_window
        half = t.gripper_period // 2
        want = np.array([1.0 if ((k - start) // half) % 2 == 0 else 0.0 for k in range(start, stop)])
        got = np.array([round(float(a[6])) for a in r.episode.actions[start:stop]])
        match.append(float(np.mean(want == got)))
        summary = firing_rate_report(r.trace, r.episode.phases, dynamic="gripper")
        sel.append(np.mean(list(summary.selectivity.values())))
    metrics = {
        "success_rate": rep["success_rate"][task.kind],
        "gripper_match": float(np.mean(match)),
        "max_translation_drift": float(np.max(drift)),
        "gripper_selectivity": float(np.mean(sel)),
        "static_rate": _rate(rep, "static_hold"),
        "gripper_rate": _rate(rep, "gripper"),
    }
    th = sec["thresholds"]
    passed = (
        metrics["gripper_match"] >= th["min_gripper_match"]
        and metrics["max_translation_drift"] <= th["max_drift"]
        and metrics["gripper_selectivity"] >= th["min_gripper_selectivity"]
    )
    first = rep["rollouts"][0].episode
    tables = {
        "episode": Table(EPISODE_HEADER, episode_rows(first)),
        "phase_rates": Table(["phase", "layer", "rate"],
                             [[ph, layer, float(v)] for ph, rates in rep["layer_rates"].items() for layer, v in enumerate(rates)]),
        "loss": _loss_table({"policy": ck.loss_curve}),
    }
    return SeedResult("decoupling", seed, metrics, bool(passed), tables, ck)


def multistep(sec: dict, seed: int, plant: PlantConfig, checkpoint: Checkpoint | None = None) -> SeedResult:
    """Delayed-cue task: multi-step membranes vs per-tick reset."""
    mc, tc = _model(sec, seed, checkpoint), _optim(sec, seed)
    task = TaskSpec.from_dict(sec["task"])
    demos = generate_demos([task], sec["n_demos"], seed, model_cfg=mc, plant_cfg=plant)
    models = {
        "multi_step": checkpoint or train(demos, tc, replace(mc, single_step_snn=False)),
        "single_step": train(demos, tc, replace(mc, single_step_snn=True)),
    }
    n = sec["n_eval"]
    probes = [replace(task, cue=1 if k % 2 == 0 else -1) for k in range(n)]  # balanced cues
    metrics, rows = {}, []
    for name, ck in models.items():
        rep = evaluate(ck, probes, ("success",), seed=_eval_seed(seed), plant_cfg=plant)
        metrics[f"{name}_success"] = rep["success_rate"][task.kind]
        q = task.pre_hold + task.cue_lag
        rows += [[name, k, probes[k].cue, float(r.episode.actions[q][0]), int(ok)]
                 for k, (r, ok) in enumerate(zip(rep["rollouts"], rep["success"]))]
    th = sec["thresholds"]
    metrics["chance"] = th["chance"]
    passed = (
        metrics["single_step_success"] <= th["chance"] + th["single_step_max_margin"]
        and metrics["multi_step_success"] >= th["chance"] + th["multi_step_min_margin"]
    )
    tables = {
        "responses": Table(["model", "episode", "cue", "dx_at_query", "success"], rows),
        "loss": _loss_table({k: v.loss_curve for k, v in models.items()}),
    }
    return SeedResult("multistep", seed, metrics, bool(passed), tables, models["multi_step"])


def reflex(sec: dict, seed: int, plant: PlantConfig, checkpoint: Checkpoint | None = None) -> SeedResult:
    """Collision-to-retraction latency with a slow cortical loop, reflex on vs off."""
    task = sample_task(TaskSpec.from_dict(sec["task"]), np.random.default_rng(seed))
    cfg = checkpoint.model if checkpoint is not None else ModelConfig()
    policy = HierarchicalPolicy(cfg)
    metrics, tables = {}, {}
    for name, on in (("reflex", True), ("cortical", False)):
        (res,) = rollout(policy, [task], [seed], mode="decoder", cortical_delay=sec["cortical_delay"], reflex=on,
                         plant_cfg=plant, record=False)
        lat = retraction_latency(res)
        metrics[f"{name}_latency"] = lat if lat is not None else -1
        tables[f"episode_{name}"] = Table(EPISODE_HEADER, episode_rows(res.episode))
    th = sec["thresholds"]
    passed = metrics["reflex_latency"] == th["reflex_latency"] and metrics["cortical_latency"] >= th["cortical_min_latency"]
    metrics["reflex_ms"] = metrics["reflex_latency"] * plant.dt * 1000.0
    metrics["cortical_ms"] = metrics["cortical_latency"] * plant.dt * 1000.0
    return SeedResult("reflex", seed, metrics, bool(passed), tables)


def rhythm(sec: dict, seed: int, plant: PlantConfig, checkpoint: Checkpoint | None = None) -> SeedResult:
    """Shake cycles detected with a live and a frozen cortical latent."""
    ck, task = _shake_model(sec, seed, plant, checkpoint)
    th = sec["thresholds"]
    metrics, rows, ok = {}, [], True
    for name, freeze in (("live", None), ("frozen", sec["freeze_at"])):
        rep = evaluate(ck, [task] * sec["n_eval"], ("success",), seed=_eval_seed(seed), plant_cfg=plant, freeze_at=freeze)
        counts, worst = [], 0
        for e, r in enumerate(rep["rollouts"]):
            peaks = shake_cycles(r)
            counts.append(len(peaks))
            err = np.abs(np.diff(peaks) - r.episode.task.shake_period)
            worst = max(worst, int(err.max()) if len(err) else 0)
            exact = len(peaks) == th["cycles"] and (len(err) == 0 or err.max() <= th["period_tolerance"])
            ok = ok and bool(exact)
            rows += [[name, e, k, int(p)] for k, p in enumerate(peaks)]
        metrics[f"{name}_cycles_min"] = int(min(counts))
        metrics[f"{name}_cycles_max"] = int(max(counts))
        metrics[f"{name}_period_error_max"] = worst
    first = evaluate(ck, [task], (), seed=_eval_seed(seed), plant_cfg=plant, freeze_at=sec["freeze_at"])["rollouts"][0]
    tables = {
        "peaks": Table(["condition", "episode", "cycle", "tick"], rows),
        "episode_frozen": Table(EPISODE_HEADER, episode_rows(first.episode)),
        "loss": _loss_table({"policy": ck.loss_curve}),
    }
    return SeedResult("rhythm", seed, metrics, ok, tables, ck)


def systolic(sec: dict, seed: int, plant: PlantConfig, checkpoint: Checkpoint | None = None) -> SeedResult:
    """Calibrated latency/energy plus a per-step cycle trace of a rollout."""
    arr = ArrayConfig(**sec["array"])
    calib = simulate_network(calibration_jobs(sec["calibration_window"]), arr)
    if checkpoint is not None:
        policy = checkpoint.policy()
    else:
        policy = HierarchicalPolicy(_model(sec, seed, None))
    task = TaskSpec.from_dict(sec["trace_task"])
    (res,) = rollout(policy, [sample_task(task, np.random.default_rng(seed))], [seed], plant_cfg=plant)
    reports = [simulate_network(extract_jobs(policy.spinal, res.trace, k), arr) for k in range(len(res.trace))]
    th = sec["thresholds"]
    metrics = {
        "calibration_cycles": calib.total_cycles,
        "latency_ms": calib.latency_s * 1e3,
        "energy_mj": calib.energy_j * 1e3,
        "trace_mean_cycles": float(np.mean([r.total_cycles for r in reports])),
        "trace_mean_skipped": float(np.mean([r.skipped_fraction for r in reports])),
    }
    passed = (
        math.isclose(calib.latency_s, th["latency_s"], rel_tol=th["rel_tol"])
        and math.isclose(calib.energy_j, th["energy_j"], rel_tol=th["rel_tol"])
    )
    tables = {
        "cycle_trace": Table(["step", "total_cycles", "latency_s", "energy_j", "skipped_fraction"], trace_rows(reports)),
        "calibration": Table(["layer", "cycles"], [[n, c] for n, c in zip(calib.layer_names, calib.layer_cycles)]),
    }
    return SeedResult("systolic", seed, metrics, bool(passed), tables)


def train_attention(sec: dict, seed: int):
    """Fit a toy Q-Former to read out the instructed object's position.

    Returns the Q-Former, the scene bank and the final training loss.
    """
    rng = np.random.default_rng(seed)
    bank = SceneBank.make(sec["d_feat"], sec["n_objects"], seed)
    qf = QFormer(sec["K"], sec["D"], sec["d_feat"], tuple(sec["layer_range"]), seed=seed)
    read = ad.parameter(rng.normal(0, 1 / math.sqrt(sec["K"] * sec["D"]), (sec["K"] * sec["D"], 2)))
    params = {**qf.params, "readout": read}
    opt = Adam(params, sec["lr"])
    scenes = [make_scene(bank, rng, sec["n_layers"]) for _ in range(sec["n_train"])]
    feats = np.stack([s[0].features for s in scenes])
    target = ad.constant(np.stack([s[2] for s in scenes]))
    loss = None
    for _ in range(sec["epochs"]):
        z, _ = qformer_distill(qf, feats)
        err = ad.reshape(z, (len(scenes), sec["K"] * sec["D"])) @ read - target
        loss = ad.mean(err * err)
        ad.zero_grad(params.values())
        ad.backward(loss)
        opt.step({k: p.grad if p.grad is not None else np.zeros_like(p.value) for k, p in params.items()})
    return qf, bank, float(loss.value) if loss is not None else float("nan")


def instructed_mass(qf: QFormer, feats: np.ndarray, instructed: np.ndarray) -> np.ndarray:
    """Attention mass (mean over queries, summed over layers) on the instructed token."""
    _, attn = qformer_distill(qf, feats)
    n_tok = feats.shape[-2]
    n_sel = attn.shape[-1] // n_tok
    per_token = attn.reshape(attn.shape[:-1] + (n_sel, n_tok)).sum(-2).mean(-2)
    return per_token[np.arange(len(feats)), instructed]


def attention(sec: dict, seed: int, plant: PlantConfig, checkpoint: Checkpoint | None = None) -> SeedResult:
    """Share of held-out scenes where attention concentrates on the instructed object."""
    qf, bank, loss = train_attention(sec, seed)
    rng = np.random.default_rng(seed + 50_000)
    scenes = [make_scene(bank, rng, sec["n_layers"]) for _ in range(sec["n_test"])]
    feats = np.stack([s[0].features for s in scenes])
    mass = instructed_mass(qf, feats, np.array([s[1] for s in scenes]))
    th = sec["thresholds"]
    frac = float(np.mean(mass > th["min_mass"]))
    metrics = {"train_loss": loss, "mean_mass": float(mass.mean()), "fraction_selective": frac}
    _, attn0 = qformer_distill(qf, feats[0])
    tables = {
        "mass": Table(["scene", "instructed_token", "mass"], [[k, s[1], float(m)] for k, (s, m) in enumerate(zip(scenes, mass))]),
        "attention_scene0": Table(["query", "token", "weight"], attention_rows(attn0)),
    }
    return SeedResult("attention", seed, metrics, frac >= th["min_fraction"], tables)


PROTOCOLS = {
    "smoothing": smoothing,
    "sparsity": sparsity,
    "decoupling": decoupling,
    "multistep": multistep,
    "reflex": reflex,
    "rhythm": rhythm,
    "systolic": systolic,
    "attention": attention,
}
assert tuple(PROTOCOLS) == EXPERIMENTS


def summarise(name: str, sec: dict, results: list[SeedResult]) -> tuple[dict, bool]:
    per_seed = {r.seed: r.metrics for r in results}
    if name == "smoothing":
        maj = float(np.mean([r.metrics["maj_reduction"] for r in results]))
        maca = float(np.mean([r.metrics["maca_reduction"] for r in results]))
        th = sec["thresholds"]
        return ({"mean_maj_reduction": maj, "mean_maca_reduction": maca, "per_seed": per_seed},
                maj >= th["maj_reduction"] and maca >= th["maca_reduction"])
    passed = all(r.passed for r in results)
    return {"seeds_passed": sum(r.passed for r in results), "per_seed": per_seed}, passed


def run_experiment(name: str, cfg: dict, seeds=None, checkpoint: Checkpoint | None = None) -> ExperimentResult:
    if name not in PROTOCOLS:
        raise KeyError(f"unknown experiment {name!r}; expected one of {EXPERIMENTS}")
    sec = cfg["experiments"][name]
    plant = PlantConfig(**cfg["plant"])
    seeds = list(cfg["seeds"] if seeds is None else seeds)
    fn = PROTOCOLS[name]
    workers = max(1, min(int(cfg.get("workers", 1)), len(seeds)))
    if workers == 1:
        results = [fn(sec, s, plant, checkpoint) for s in seeds]
    else:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda s: fn(sec, s, plant, checkpoint), seeds))  # map keeps seed order
    metrics, passed = summarise(name, sec, results)
    return ExperimentResult(name, seeds, results, metrics, bool(passed))


# ------------------------------------------------------------------- writing


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def csv_text(table: Table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.header)
    for row in table.rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _plain(v):
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else str(f)
    return v


def json_text(record: dict) -> str:
    return json.dumps(_plain(record), indent=2, sort_keys=True) + "\n"


def metrics_table(result: ExperimentResult) -> Table:
    rows = []
    for r in result.per_seed:
        for k in sorted(r.metrics):
            rows.append([r.seed, k, r.metrics[k]])
        rows.append([r.seed, "pass", r.passed])
    return Table(["seed", "metric", "value"], rows)
