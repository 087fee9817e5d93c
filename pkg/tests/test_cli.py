import csv
import json

import numpy as np
import pytest

from olgclear import nn
from olgclear.cli import PROFILE_HEADER, main
from olgclear.config import SHIPPED, dumps, load_config, parse_config, to_dict
from olgclear.economy.single import ConfigError

TINY_SINGLE = {
    "model": "single",
    "economy": {"H": 3, "B": 0.3},
    "network": {"hidden": [6]},
    "training": {"episodes": 2, "trajectories": 32, "epochs": 1, "minibatch": 16, "quad_order": 2, "lr": 1e-3},
    "evaluation": {"states": 32, "periods": 2},
}

TINY_MULTI = {
    "model": "multi",
    "economy": {"H": 3},
    "network": {"hidden": [4]},
    "training": {"episodes": 1, "trajectories": 16, "epochs": 1, "minibatch": 16, "quad_order": 2, "lr": 1e-3},
    "homotopy": {"initial_episodes": 1, "episodes": 1},
    "evaluation": {"states": 16, "periods": 1},
}


def write_config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


# --- configuration ------------------------------------------------------------------

@pytest.mark.parametrize("name", SHIPPED)
def test_config_round_trip(name):
    cfg = load_config(name)
    again = parse_config(json.loads(dumps(cfg)))
    assert again == cfg
    assert to_dict(again) == to_dict(cfg)


def test_shipped_configs_carry_the_full_scale_sizes():
    single = load_config("single_asset")
    assert single.dims == [21, 400, 400, 41]
    assert single.train.steps_per_episode == 640 == 8192 * 10 // 128
    assert single.train.episodes == 3584 and single.train.quad_order == 8
    assert single.evaluation.states == 8192

    multi = load_config("multi_asset_homotopy")
    assert multi.dims == [161, 400, 400, 158]
    assert multi.train.steps_per_episode == 640
    assert (multi.homotopy.stock_steps, multi.homotopy.house_steps) == (10, 20)
    assert multi.evaluation.periods == 256


def test_unknown_key_is_named():
    with pytest.raises(ConfigError) as exc:
        parse_config({**TINY_SINGLE, "economy": {"H": 3, "tau": 1.0}})
    assert exc.value.field == "economy.tau"


def test_bad_vector_length_exits_2_naming_the_field(tmp_path, capsys):
    path = write_config(tmp_path, {**TINY_SINGLE, "economy": {"H": 3, "y": [0.5, 0.5]}})
    assert main(["train-single", "--config", path, "--out", str(tmp_path / "o")]) == 2
    assert "economy.y" in capsys.readouterr().err


def test_malformed_json_exits_2(tmp_path, capsys):
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["train-single", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 2
    assert "invalid JSON" in capsys.readouterr().err


def test_wrong_model_for_command_exits_2(tmp_path):
    path = write_config(tmp_path, TINY_SINGLE)
    assert main(["homotopy", "--config", path, "--out", str(tmp_path / "o")]) == 2


# --- train-single -----------------------------------------------------------------------

def test_train_single_writes_artifacts(tmp_path):
    path = write_config(tmp_path, TINY_SINGLE)
    out = tmp_path / "run"
    assert main(["train-single", "--config", path, "--out", str(out)]) == 0
    with open(out / "metrics.csv") as fh:
        assert len(list(csv.reader(fh))) == 1 + 2
    ck = nn.load_checkpoint(out / "checkpoint.bin", expect_dims=[4, 6, 7])
    assert ck.extra["episodes_done"] == 2
    assert parse_config(json.loads((out / "config.json").read_text())).train.episodes == 2


def test_zero_episodes_writes_initial_checkpoint(tmp_path):
    path = write_config(tmp_path, TINY_SINGLE)
    out = tmp_path / "run"
    assert main(["train-single", "--config", path, "--out", str(out), "--episodes", "0", "--seed", "4"]) == 0
    ck = nn.load_checkpoint(out / "checkpoint.bin")
    fresh = nn.init_mlp([4, 6, 7], ck.params.heads, seed=4)
    assert ck.params.flat().tobytes() == fresh.flat().tobytes()


def test_negative_episodes_rejected(tmp_path):
    path = write_config(tmp_path, TINY_SINGLE)
    assert main(["train-single", "--config", path, "--out", str(tmp_path / "o"), "--episodes", "-1"]) == 2


# --- evaluate and profiles ------------------------------------------------------------------

@pytest.fixture
def trained_single(tmp_path):
    path = write_config(tmp_path, TINY_SINGLE)
    out = tmp_path / "run"
    assert main(["train-single", "--config", path, "--out", str(out), "--deterministic"]) == 0
    return path, out / "checkpoint.bin"


def test_evaluate_schema(tmp_path, trained_single):
    path, ck = trained_single
    out = tmp_path / "eval"
    assert main(["evaluate", "--config", path, "--out", str(out), "--checkpoint", str(ck)]) == 0
    with open(out / "evaluation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["residual_family", "type", "age", "min", "p10", "mean", "p90", "p99", "max"]
    assert {r["residual_family"] for r in rows} == {"bond", "rent"}
    assert len(rows) == (3 - 1) + 3
    for r in rows:
        assert float(r["min"]) <= float(r["p10"]) <= float(r["p90"]) <= float(r["p99"]) <= float(r["max"])


def test_evaluate_rejects_mismatched_checkpoint(tmp_path, trained_single):
    _, ck = trained_single
    other = write_config(tmp_path, {**TINY_SINGLE, "network": {"hidden": [5]}}, "other.json")
    assert main(["evaluate", "--config", other, "--out", str(tmp_path / "e"), "--checkpoint", str(ck)]) == 2


def test_profiles_row_count(tmp_path, trained_single):
    path, ck = trained_single
    out = tmp_path / "prof"
    assert main(["profiles", "--config", path, "--out", str(out), "--checkpoint", str(ck)]) == 0
    with open(out / "profiles.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == PROFILE_HEADER
    variables = {r[0] for r in rows[1:]}
    assert variables == {"consumption", "bond", "rent"}
    assert len(rows) - 1 == len(variables) * 1 * 3
    bond_oldest = [r for r in rows[1:] if r[0] == "bond" and r[2] == "3"]
    assert float(bond_oldest[0][3]) == 0.0


# --- homotopy --------------------------------------------------------------------------------

def test_homotopy_default_schedule_makes_35_stage_dirs(tmp_path):
    path = write_config(tmp_path, TINY_MULTI)
    out = tmp_path / "hom"
    assert main(["homotopy", "--config", path, "--out", str(out), "--deterministic"]) == 0
    stages = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert len(stages) == 35
    assert stages[0] == "stage_00_bond-only" and stages[-1] == "stage_34_house-20"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["failed"] is None and len(manifest["stages"]) == 35

    # the final stage evaluates four residual families for each of the two types
    with open(out / stages[-1] / "evaluation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len({(r["residual_family"], r["type"]) for r in rows}) == 8

    # a masked asset profiles as an all-zero column
    prof = tmp_path / "prof"
    ck = out / "stage_00_bond-only" / "checkpoint.bin"
    assert main(["profiles", "--config", path, "--out", str(prof), "--checkpoint", str(ck)]) == 0
    with open(prof / "profiles.csv") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        if r["variable"] in ("stock", "house"):
            assert float(r["mean"]) == float(r["p10"]) == float(r["p90"]) == 0.0
    assert len(rows) == 5 * 2 * 3

    # resuming a finished run does nothing and keeps every artifact
    before = (out / stages[-1] / "checkpoint.bin").read_bytes()
    assert main(["homotopy", "--config", path, "--out", str(out), "--resume"]) == 0
    assert (out / stages[-1] / "checkpoint.bin").read_bytes() == before


@pytest.mark.slow
def test_profiles_consumption_positive_after_training(tmp_path):
    run = tmp_path / "run"
    assert main(["train-single", "--config", "single_reduced", "--out", str(run), "--episodes", "200"]) == 0
    out = tmp_path / "prof"
    assert main(["profiles", "--config", "single_reduced", "--out", str(out),
                 "--checkpoint", str(run / "checkpoint.bin"), "--start", str(run / "states.npy")]) == 0
    with open(out / "profiles.csv") as fh:
        cons = [float(r["p10"]) for r in csv.DictReader(fh) if r["variable"] == "consumption"]
    assert len(cons) == 5 and min(cons) > 0


def test_profiles_from_a_start_file(tmp_path, trained_single):
    path, ck = trained_single
    bad = tmp_path / "bad.npy"
    np.save(bad, np.zeros((4, 3)))
    assert main(["profiles", "--config", path, "--out", str(tmp_path / "p"), "--checkpoint", str(ck),
                 "--start", str(bad)]) == 2
