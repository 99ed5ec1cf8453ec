"""Acceptance criteria A1-A10; each prints one PASS/FAIL line."""

import copy
import time

import numpy as np
import pytest
from conftest import report

from neuromotor import autodiff as ad
from neuromotor import cli
from neuromotor.config import DEFAULTS
from neuromotor.experiments import multistep, rhythm, run_experiment, smoothing, sparsity
from neuromotor.lif import LifConfig, lif_step, reset_state
from neuromotor.plant import PlantConfig, TaskSpec
from neuromotor.policy import HierarchicalPolicy, ModelConfig
from neuromotor.trainer import TrainConfig, _batch_inputs, generate_demos, sequence_loss

SEEDS = DEFAULTS["seeds"]
PLANT = PlantConfig()


def section(name):
    return copy.deepcopy(DEFAULTS["experiments"][name])


# ---------------------------------------------------------------------- A1


def scalar_neuron(beta, theta, currents):
    """Plain-float delayed soft-reset neuron."""
    u = s = 0.0
    us, ss = [], []
    for i in currents:
        u = u * beta + i - s * theta
        s = 1.0 if u >= theta else 0.0
        us.append(u)
        ss.append(s)
    return us, ss


def test_a1_lif_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    n_cfg, n_neurons, steps = 100, 100, 12
    mismatches = 0
    for _ in range(n_cfg):
        beta, theta = rng.uniform(0.01, 0.99), rng.uniform(0.1, 3.0)
        cur = rng.normal(0.4 * theta, theta, (steps, n_neurons))
        cfg = LifConfig(beta=beta, theta=theta, window=steps)
        state = reset_state(n_neurons)
        us, ss = [], []
        for t in range(steps):
            s, state = lif_step(state, cur[t], cfg)
            us.append(state.u.value.copy())
            ss.append(s.value.copy())
        us, ss = np.array(us), np.array(ss)
        for n in range(n_neurons):
            ref_u, ref_s = scalar_neuron(beta, theta, cur[:, n].tolist())
            mismatches += us[:, n].tolist() != ref_u or ss[:, n].tolist() != ref_s
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 10.0
    report("A1 LIF oracle", ok, f"{n_cfg * n_neurons} sequences, {mismatches} mismatches, {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------------- A2

MODULES = ("qformer.", "gru.", "film.", "forward_model.", "spinal.")


def test_a2_gradient_fidelity():
    t0 = time.perf_counter()
    cfg = ModelConfig(K=2, D=8, n_hidden=8, gru_hidden=4, proj_dim=4, history=3, lif_window=2,
                      cortex="qformer", feat_dim=6, feat_layers=2, layer_range=(1, 2))
    policy = HierarchicalPolicy(cfg)
    rng = np.random.default_rng(5)
    # random weights so every module (including zero-initialised heads) carries gradient
    for p in policy.params.values():
        p.value[...] = rng.normal(0, 0.4, p.shape)
    demos = generate_demos([TaskSpec("reach")], 2, seed=0, model_cfg=cfg)
    z, win, act, nxt = _batch_inputs(policy, demos, 10, 13, np.random.default_rng(0))
    tc = TrainConfig()

    def loss():
        policy.reset(len(demos))
        return sequence_loss(policy, z, win, act, nxt, tc, smooth_reference=True)

    out = loss()
    ad.zero_grad(policy.params.values())
    ad.backward(out)
    grads = {k: p.grad.copy() for k, p in policy.params.items()}
    worst, nonzero, h = {}, 0, 1e-6
    for prefix in MODULES:
        names = sorted(k for k in policy.params if k.startswith(prefix))
        errs = []
        for _ in range(20):
            name = names[rng.integers(len(names))]
            p = policy.params[name]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            old = p.value[idx]
            p.value[idx] = old + h
            plus = loss().value
            p.value[idx] = old - h
            minus = loss().value
            p.value[idx] = old
            fd, an = (plus - minus) / (2 * h), grads[name][idx]
            nonzero += abs(fd) > 1e-8
            errs.append(abs(an - fd) / max(abs(an), abs(fd), 1e-8))
        worst[prefix] = max(errs)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and nonzero >= 0.9 * 20 * len(MODULES) and elapsed < 60
    detail = ", ".join(f"{k[:-1]} {v:.1e}" for k, v in worst.items())
    report("A2 gradient fidelity", ok, f"max rel err {detail}; {nonzero} non-zero probes; {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------------- A3


def test_a3_smoothing():
    t0 = time.perf_counter()
    sec = section("smoothing")
    results = [smoothing(sec, s, PLANT) for s in SEEDS]
    elapsed = time.perf_counter() - t0
    maj = float(np.mean([r.metrics["maj_reduction"] for r in results]))
    maca = float(np.mean([r.metrics["maca_reduction"] for r in results]))
    per = " ".join(f"s{r.seed}:{r.metrics['maj_reduction']:.0%}/{r.metrics['maca_reduction']:.0%}" for r in results)
    th = sec["thresholds"]
    ok = maj >= th["maj_reduction"] and maca >= th["maca_reduction"] and elapsed < 900
    report("A3 smoothing", ok, f"MAJ -{maj:.1%}, MACA -{maca:.1%} [{per}], {elapsed:.0f} s")
    assert ok


# ------------------------------------------------------------------- A4, A7


@pytest.fixture(scope="module")
def rhythm_runs():
    sec = section("rhythm")
    return [rhythm(sec, s, PLANT) for s in SEEDS]


def test_a7_rhythm(rhythm_runs):
    passed = [r.seed for r in rhythm_runs if r.passed]
    per = " ".join(
        f"s{r.seed}:{r.metrics['live_cycles_min']}-{r.metrics['live_cycles_max']}/"
        f"{r.metrics['frozen_cycles_min']}-{r.metrics['frozen_cycles_max']}" for r in rhythm_runs
    )
    ok = len(passed) == len(SEEDS)
    report("A7 rhythm", ok, f"{len(passed)}/{len(SEEDS)} seeds; cycles live/frozen [{per}]")
    assert ok


def test_a4_sparsity(rhythm_runs):
    sec = section("sparsity")
    results = [sparsity(sec, r.seed, PLANT, r.checkpoint) for r in rhythm_runs]
    ratios = [r.metrics["rate_ratio"] for r in results]
    ok = all(r.passed for r in results)
    report("A4 sparsity", ok, "static/dynamic rate " + " ".join(f"{x:.2f}" for x in ratios))
    assert ok


# ---------------------------------------------------------------------- A5


def test_a5_multistep():
    sec = section("multistep")
    results = [multistep(sec, s, PLANT) for s in SEEDS]
    per = " ".join(f"s{r.seed}:{r.metrics['multi_step_success']:.2f}/{r.metrics['single_step_success']:.2f}" for r in results)
    ok = all(r.passed for r in results)
    report("A5 temporal memory", ok, f"multi/single success [{per}], chance {sec['thresholds']['chance']}")
    assert ok


# ---------------------------------------------------------------------- A6


def test_a6_reflex_latency():
    runs = [run_experiment("reflex", DEFAULTS, seeds=[0]) for _ in range(2)]
    m = runs[0].per_seed[0].metrics
    deterministic = m == runs[1].per_seed[0].metrics
    ok = runs[0].passed and deterministic and m["reflex_latency"] == 1 and m["cortical_latency"] >= 10
    report("A6 reflex latency", ok,
           f"reflex {m['reflex_latency']} tick ({m['reflex_ms']:.0f} ms), cortical {m['cortical_latency']} ticks "
           f"({m['cortical_ms']:.0f} ms)")
    assert ok


# ---------------------------------------------------------------------- A8


def test_a8_systolic_calibration():
    res = run_experiment("systolic", DEFAULTS, seeds=[0])
    m = res.per_seed[0].metrics
    ok = (res.passed and m["latency_ms"] == pytest.approx(2.19, rel=0.005)
          and m["energy_mj"] == pytest.approx(0.87, rel=0.005))
    report("A8 systolic calibration", ok,
           f"{m['calibration_cycles']} cycles, {m['latency_ms']:.3f} ms, {m['energy_mj']:.3f} mJ")
    assert ok


# ---------------------------------------------------------------------- A9


def test_a9_attention_selectivity():
    res = run_experiment("attention", DEFAULTS)
    fracs = [r.metrics["fraction_selective"] for r in res.per_seed]
    ok = res.passed and min(fracs) >= 0.9
    report("A9 attention selectivity", ok, "selective fraction per seed " + " ".join(f"{f:.2f}" for f in fracs))
    assert ok


# --------------------------------------------------------------------- A10


def _csv_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


def test_a10_determinism(tmp_path):
    import json

    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "train": {
            "model": {"K": 2, "D": 8, "n_hidden": 16, "gru_hidden": 8, "proj_dim": 4, "history": 3, "lif_window": 2},
            "optim": {"epochs": 2, "batch_episodes": 2},
            "demos": {"n": 4},
        },
        "experiments": {"attention": {"epochs": 50, "n_train": 32, "n_test": 20}},
    }))
    commands = [
        ["train"],
        ["experiment", "reflex"],
        ["experiment", "systolic"],
        ["experiment", "attention"],
        ["export", "attention"],
    ]
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        for cmd in commands:
            assert cli.main([*cmd, "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
        ck = str(out / "checkpoint.nmck")
        for art in ("activity", "kinematic_map"):
            assert cli.main(["export", art, "--config", str(cfg), "--seed", "3", "--checkpoint", ck, "--out", str(out)]) == 0
        outputs.append(_csv_bytes(out))
    same = outputs[0] == outputs[1] and len(outputs[0]) > 0
    same_ck = (tmp_path / "a" / "checkpoint.nmck").read_bytes() == (tmp_path / "b" / "checkpoint.nmck").read_bytes()
    ok = same and same_ck
    report("A10 determinism", ok, f"{len(outputs[0])} CSV files byte-identical across re-runs")
    assert ok
