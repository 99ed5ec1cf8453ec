"""Command line harness: ``train``, ``experiment`` and ``export``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O failure.  Every output file is a deterministic function of config and
seed; wall-clock timestamps go only to the ``run.log`` sidecar.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .autodiff import ContractError, DimensionError, NonFiniteError
from .config import ARTIFACTS, EXPERIMENTS, ConfigError
from .cortical import attention_rows, make_scene, qformer_distill
from .experiments import Table, csv_text, json_text, metrics_table, run_experiment, train_attention
from .plant import PlantConfig, TaskSpec, sample_task
from .policy import ModelConfig, intent_features, rollout
from .spinal import neuron_kinematic_map
from .trainer import Checkpoint, TrainConfig, TrainingDiverged, generate_demos, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
log = logging.getLogger("neuromotor")


class OutputError(OSError):
    """Failure writing an artifact."""


def _write(path: Path, data) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(data, bytes):
            path.write_bytes(data)
        else:
            path.write_text(data)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _sidecar(out: Path) -> logging.Handler | None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(out / "run.log")
    except OSError as exc:
        raise OutputError(f"cannot open log in {out}: {exc.strerror or exc}") from exc
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def _load_checkpoint(path: str | None) -> Checkpoint | None:
    if path is None:
        return None
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise OutputError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    try:
        return Checkpoint.from_bytes(data)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid checkpoint: {exc}", path) from exc


def _seeds(cfg: dict, seed: int | None) -> list[int]:
    return [seed] if seed is not None else list(cfg["seeds"])


# ------------------------------------------------------------------ commands


def cmd_train(cfg: dict, out: Path, seed: int | None = None) -> int:
    seed = _seeds(cfg, seed)[0]
    sec = cfg["train"]
    model = ModelConfig.from_dict({**sec["model"], "seed": seed})
    optim = TrainConfig.from_dict({**sec["optim"], "seed": seed})
    tasks = [TaskSpec.from_dict(t) for t in sec["demos"]["tasks"]]
    plant = PlantConfig(**cfg["plant"])
    log.info("generating %d demos (seed %d)", sec["demos"]["n"], seed)
    demos = generate_demos(tasks, sec["demos"]["n"], seed, model_cfg=model, plant_cfg=plant,
                           tremor=sec["demos"]["tremor"], freeze_prob=sec["demos"]["freeze_prob"])
    ck = train(demos, optim, model, log=lambda e, l: log.info("epoch %d loss %.6g", e, l))
    _write(out / "checkpoint.nmck", ck.to_bytes())
    _write(out / "loss.csv", csv_text(Table(["epoch", "loss"], [[e, v] for e, v in enumerate(ck.loss_curve)])))
    _write(out / "train.json", json_text({"seed": seed, "epochs": len(ck.loss_curve), "final_loss": ck.final_loss}))
    log.info("final loss %.6g", ck.final_loss)
    print(f"final loss {ck.final_loss:.6g}")
    return EXIT_OK


def cmd_experiment(name: str, cfg: dict, out: Path, seed: int | None = None, checkpoint: Checkpoint | None = None) -> int:
    res = run_experiment(name, cfg, _seeds(cfg, seed), checkpoint)
    base = out / name
    for r in res.per_seed:
        d = base / f"seed{r.seed}"
        _write(d / "metrics.json", json_text(r.record()))
        for stem, table in sorted(r.tables.items()):
            _write(d / f"{stem}.csv", csv_text(table))
        if r.checkpoint is not None and checkpoint is None:
            _write(d / "checkpoint.nmck", r.checkpoint.to_bytes())
        log.info("%s seed %d: %s", name, r.seed, "pass" if r.passed else "FAIL")
    _write(base / "summary.json", json_text(res.record()))
    _write(base / "metrics.csv", csv_text(metrics_table(res)))
    print(f"{name}: {'PASS' if res.passed else 'FAIL'}")
    return EXIT_OK


def _activity(cfg: dict, ck: Checkpoint, seed: int) -> Table:
    sec = cfg["export"]
    task = sample_task(TaskSpec.from_dict(sec["task"]), np.random.default_rng(seed))
    if sec["ticks"] > task.episode_ticks:
        raise ConfigError(f"export.ticks {sec['ticks']} exceeds the task's {task.episode_ticks} ticks")
    (res,) = rollout(ck.policy(), [task], [seed], plant_cfg=PlantConfig(**cfg["plant"]))
    rows = [row for row in res.trace.rows() if row[0] < sec["ticks"]]
    return Table(["step", "layer", "rate"], rows)


def _attention(cfg: dict, ck: Checkpoint | None, seed: int) -> Table:
    if ck is not None and ck.model.cortex == "qformer":
        pol = ck.policy()
        task = sample_task(TaskSpec.from_dict(cfg["export"]["task"]), np.random.default_rng(seed))
        (res,) = rollout(None, [task], [seed], mode="expert", codec=pol.codec, record=False, reflex=False)
        feats = intent_features(pol.codec, res.z_sem[-1], ck.model.feat_layers, ck.model.feat_dim, np.random.default_rng(seed))
        _, attn = qformer_distill(pol.qformer, feats)
    else:
        sec = cfg["experiments"]["attention"]
        qf, bank, _ = train_attention(sec, seed)
        stack, _, _ = make_scene(bank, np.random.default_rng(cfg["export"]["scene_seed"]), sec["n_layers"])
        _, attn = qformer_distill(qf, stack)
    return Table(["query", "token", "weight"], attention_rows(attn))


def _kinematic_map(cfg: dict, ck: Checkpoint, seed: int) -> Table:
    policy = ck.policy()
    rng = np.random.default_rng(seed)
    traces, actions = [], []
    for k, t in enumerate(cfg["export"]["kinematic_tasks"]):
        task = sample_task(TaskSpec.from_dict(t), rng)
        (res,) = rollout(policy, [task], [seed + k], plant_cfg=PlantConfig(**cfg["plant"]))
        traces.append(res.trace)
        actions.extend(res.episode.actions)
    merged = traces[0]
    for tr in traces[1:]:
        merged.spikes += tr.spikes
        merged.probe_u += tr.probe_u
        merged.readout_raw += tr.readout_raw
    km = neuron_kinematic_map(merged, actions)
    return Table(["dim", "neuron", "rate"], km.rows())


def cmd_export(artifact: str, cfg: dict, out: Path, checkpoint: Checkpoint | None, seed: int | None = None) -> int:
    seed = _seeds(cfg, seed)[0]
    if artifact != "attention" and checkpoint is None:
        raise ConfigError(f"export {artifact} needs --checkpoint")
    table = {"activity": _activity, "attention": _attention, "kinematic_map": _kinematic_map}[artifact](cfg, checkpoint, seed)
    _write(out / f"{artifact}.csv", csv_text(table))
    print(f"wrote {out / (artifact + '.csv')}")
    return EXIT_OK


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config (defaults when omitted)")
    common.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    common.add_argument("--out", default="out", help="output directory")
    p = argparse.ArgumentParser(prog="neuromotor", description="Hierarchical spiking motor control experiments")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="generate demos and train a policy")
    e = sub.add_parser("experiment", parents=[common], help="run a end-to-end protocol")
    e.add_argument("name", choices=EXPERIMENTS)
    e.add_argument("--checkpoint", help="use this trained policy instead of training one")
    x = sub.add_parser("export", parents=[common], help="write CSV exports")
    x.add_argument("artifact", choices=ARTIFACTS)
    x.add_argument("--checkpoint")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors as 2
        return int(exc.code or 0)
    out = Path(args.out)
    handler = None
    try:
        cfg = config_mod.load(args.config)
        handler = _sidecar(out)
        log.info("command %s config %s seed %s", args.command, args.config, args.seed)
        if args.command == "train":
            return cmd_train(cfg, out, args.seed)
        ck = _load_checkpoint(args.checkpoint)
        if args.command == "experiment":
            return cmd_experiment(args.name, cfg, out, args.seed, ck)
        return cmd_export(args.artifact, cfg, out, ck, args.seed)
    except (ConfigError, DimensionError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        if handler is not None:
            log.removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
