import csv
import io
import json

import numpy as np
import pytest

from neuromotor import cli
from neuromotor import config as cfgmod
from neuromotor.config import DEFAULTS, ConfigError
from neuromotor.trainer import TrainingDiverged

TINY = {
    "seeds": [0],
    "train": {
        "model": {"K": 2, "D": 8, "n_hidden": 16, "gru_hidden": 8, "proj_dim": 4, "history": 3, "lif_window": 2},
        "optim": {"epochs": 2, "batch_episodes": 2},
        "demos": {"n": 4, "tasks": [{"kind": "reach"}, {"kind": "static_hold"}]},
    },
}


def write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc, indent=2))
    return str(path)


def read_csv(path):
    return list(csv.reader(io.StringIO(path.read_text())))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("trained")
    cfg = write_config(d, TINY)
    assert cli.main(["train", "--config", cfg, "--out", str(d / "run")]) == 0
    return d, cfg


# ------------------------------------------------------------------ config


def test_published_schema_matches_generator():
    assert cfgmod.published_schema() == cfgmod.build_schema()


def test_defaults_validate():
    assert cfgmod.parse("{}") == DEFAULTS


def test_unknown_key_names_its_line():
    text = '{\n  "seeds": [0],\n  "train": {\n    "optim": {\n      "epochz": 3\n    }\n  }\n}'
    with pytest.raises(ConfigError) as exc:
        cfgmod.parse(text, "c.json")
    assert exc.value.line == 5
    assert str(exc.value) == "c.json:5: train.optim: unknown key 'epochz'"


def test_type_error_names_its_line():
    text = '{\n  "plant": {},\n  "seeds": "zero"\n}'
    with pytest.raises(ConfigError) as exc:
        cfgmod.parse(text, "c.json")
    assert exc.value.line == 3 and "seeds" in str(exc.value)


def test_bad_json_names_its_line():
    with pytest.raises(ConfigError) as exc:
        cfgmod.parse('{\n  "seeds": [0,]\n}')
    assert exc.value.line == 2


def test_semantic_error():
    doc = {"train": {"demos": {"tasks": [{"kind": "shake", "episode_ticks": 20}]}}}
    with pytest.raises(ConfigError):
        cfgmod.parse(json.dumps(doc))


def test_key_lines():
    lines = cfgmod.key_lines('{\n "a": [\n  1,\n  {"b": 2}\n ]\n}')
    assert lines[("a",)] == 2 and lines[("a", 1)] == 4 and lines[("a", 1, "b")] == 4


def test_default_thresholds_match_acceptance():
    ex = DEFAULTS["experiments"]
    assert ex["smoothing"]["thresholds"] == {"maj_reduction": 0.5, "maca_reduction": 0.25}
    assert ex["sparsity"]["thresholds"] == {"max_rate_ratio": 0.5}
    assert ex["multistep"]["thresholds"]["single_step_max_margin"] == 0.1
    assert ex["multistep"]["thresholds"]["multi_step_min_margin"] == 0.3
    assert ex["reflex"]["thresholds"] == {"reflex_latency": 1, "cortical_min_latency": 10}
    assert ex["reflex"]["cortical_delay"] == 10
    assert ex["rhythm"]["thresholds"] == {"cycles": 3, "period_tolerance": 1}
    assert ex["systolic"]["thresholds"] == {"latency_s": 2.19e-3, "energy_j": 0.87e-3, "rel_tol": 0.005}
    assert ex["attention"]["thresholds"] == {"min_mass": 0.6, "min_fraction": 0.9}
    assert DEFAULTS["seeds"] == [0, 1, 2, 3, 4]


# --------------------------------------------------------------------- CLI


def test_missing_config_exits_2(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2


def test_invalid_config_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path, {"bogus": 1})
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "unknown key 'bogus'" in capsys.readouterr().err


def test_unknown_experiment_exits_2(tmp_path):
    assert cli.main(["experiment", "juggling", "--out", str(tmp_path)]) == 2


def test_train_writes_checkpoint_and_loss(trained):
    d, _ = trained
    run = d / "run"
    assert (run / "checkpoint.nmck").stat().st_size > 0
    rows = read_csv(run / "loss.csv")
    assert rows[0] == ["epoch", "loss"] and len(rows) == 3
    assert json.loads((run / "train.json").read_text())["epochs"] == 2


def test_train_is_byte_identical_on_repeat(trained, tmp_path):
    d, cfg = trained
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path)]) == 0
    for name in ("checkpoint.nmck", "loss.csv", "train.json"):
        assert (tmp_path / name).read_bytes() == (d / "run" / name).read_bytes()


def test_timestamps_only_in_sidecar(trained):
    run = trained[0] / "run"
    log = (run / "run.log").read_text()
    assert "final loss" in log and log[:4].isdigit()
    assert not any(c == ":" for c in (run / "loss.csv").read_text())


def test_nan_loss_exits_3(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise TrainingDiverged("loss is nan")

    monkeypatch.setattr(cli, "train", boom)
    cfg = write_config(tmp_path, TINY)
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 3


def test_unwritable_output_exits_4(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["experiment", "reflex", "--seed", "0", "--out", str(blocker / "sub")]) == 4


def test_reflex_experiment_metrics_json(tmp_path):
    assert cli.main(["experiment", "reflex", "--seed", "0", "--out", str(tmp_path)]) == 0
    rec = json.loads((tmp_path / "reflex" / "seed0" / "metrics.json").read_text())
    assert set(rec) == {"experiment", "seed", "metrics", "pass"}
    assert rec["experiment"] == "reflex" and rec["seed"] == 0 and rec["pass"] is True
    assert read_csv(tmp_path / "reflex" / "metrics.csv")[0] == ["seed", "metric", "value"]


def test_export_needs_checkpoint(tmp_path):
    assert cli.main(["export", "activity", "--out", str(tmp_path)]) == 2


def test_export_activity(trained, tmp_path):
    ck = str(trained[0] / "run" / "checkpoint.nmck")
    assert cli.main(["export", "activity", "--config", trained[1], "--checkpoint", ck, "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "activity.csv")
    assert rows[0] == ["step", "layer", "rate"]
    steps = {int(r[0]) for r in rows[1:]}
    layers = {r[1] for r in rows[1:]}
    assert steps == set(range(10)) and len(rows) - 1 == 10 * len(layers)


def test_export_attention_rows_sum_to_one(tmp_path):
    doc = {"experiments": {"attention": {"epochs": 20, "n_train": 16}}}
    cfg = write_config(tmp_path, doc)
    assert cli.main(["export", "attention", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "attention.csv")[1:]
    sums = {}
    for q, _, w in rows:
        sums[q] = sums.get(q, 0.0) + float(w)
    np.testing.assert_allclose(list(sums.values()), 1.0, rtol=1e-12)


def test_export_kinematic_map(trained, tmp_path):
    ck = str(trained[0] / "run" / "checkpoint.nmck")
    assert cli.main(["export", "kinematic_map", "--config", trained[1], "--checkpoint", ck, "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "kinematic_map.csv")
    assert rows[0] == ["dim", "neuron", "rate"]
    assert len(rows) - 1 == 7 * 16
    assert {(int(r[0]), int(r[1])) for r in rows[1:]} == {(d, n) for d in range(7) for n in range(16)}


def test_export_write_failure_exits_4(trained, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    ck = str(trained[0] / "run" / "checkpoint.nmck")
    code = cli.main(["export", "activity", "--config", trained[1], "--checkpoint", ck, "--out", str(blocker / "x")])
    assert code == 4


def test_corrupt_checkpoint_exits_2(tmp_path):
    bad = tmp_path / "bad.nmck"
    bad.write_bytes(b"junk")
    assert cli.main(["export", "activity", "--checkpoint", str(bad), "--out", str(tmp_path)]) == 2
