import csv
import json
from pathlib import Path

import numpy as np
import pytest

from asaerc import cli
from asaerc.config import ConfigValidationError, ExperimentConfig, config_from_dict, json_schema, load_config

SMOKE = dict(
    seed=0,
    data=dict(systems=["Lorenz", "Logistic"], n_samples=300),
    reservoir=dict(nx=24, ny=24),
    model=dict(kind="asaerc", n_fix=9, n=9, hidden=16),
    train=dict(max_epochs=3),
)


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


# --- config --------------------------------------------------------------------------------


def test_defaults_validate():
    cfg = ExperimentConfig()
    assert cfg.reservoir.build().grid.nx == 64
    assert cfg.train.build(3).seed == 3


@pytest.mark.parametrize(
    "patch, msg",
    [
        ({"bogus": 1}, "unknown key"),
        ({"data": {"systems": ["Nope"]}}, "unknown system"),
        ({"data": {"n_samples": "many"}}, "integer"),
        ({"model": {"kind": "transformer"}}, "model.kind"),
        ({"train": {"batch_size": 0}}, "batch_size"),
        ({"reservoir": {"dt_fraction": 1.5}}, "CFL"),
        ({"reservoir": {"T_offset": 200}}, "T_offset"),
        ({"model": {"extra": True}}, "unknown key"),
    ],
)
def test_config_rejections(patch, msg):
    with pytest.raises(ConfigValidationError, match=msg):
        config_from_dict(patch)


def test_config_round_trip(tmp_path):
    cfg = config_from_dict(SMOKE)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert load_config(p) == cfg


def test_schema_covers_every_field():
    schema = json_schema()
    assert schema["additionalProperties"] is False
    assert set(schema["properties"]) == set(ExperimentConfig().to_dict())
    assert schema["properties"]["reservoir"]["properties"]["nu"]["type"] == "number"


def test_hash_scoping():
    a = config_from_dict(SMOKE)
    b = config_from_dict({**SMOKE, "reservoir": dict(nx=24, ny=24, nu=0.04)})
    assert cli.data_key(a) == cli.data_key(b)
    assert cli.store_key(a) != cli.store_key(b)
    assert cli.model_key(a) != cli.model_key(b)
    c = config_from_dict({**SMOKE, "seed": 1})
    assert cli.store_key(a) == cli.store_key(c) and cli.model_key(a) != cli.model_key(c)


# --- pipeline ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg_path = _write(tmp, SMOKE)
    assert cli.main(["pipeline", "--config", str(cfg_path), "--out-dir", str(tmp / "out"), "--threads", "1"]) == 0
    return tmp, cfg_path


def test_pipeline_artifacts(smoke_run):
    tmp, _ = smoke_run
    out = tmp / "out"
    man = json.loads((out / "run_manifest.json").read_text())
    assert [s["stage"] for s in man["stages"]] == ["gen-data", "run-reservoir", "train", "evaluate", "analyze"]
    assert {"numpy", "scipy", "python"} <= set(man["versions"])
    model_dir = next((out / "models").iterdir())
    rows = list(csv.reader(open(model_dir / "history.csv")))
    assert rows[0] == ["epoch", "train_mse", "test_mse", "lr", "seconds"] and len(rows) == 4
    ev = json.loads((model_dir / "eval.json").read_text())
    assert ev["config_hash"] == man["hashes"]["model"]
    assert set(ev["per_system"]) == {"Lorenz", "Logistic"}
    an = next((out / "analysis").iterdir())
    head = (an / "rho_values.csv").read_text().splitlines()
    assert head[0] == "bin_left,bin_right,count" and len(head) == 51
    summary = json.loads((an / "summary.json").read_text())
    assert summary["correlations"]["conventions"]["covariance"].startswith("population")
    assert (an / "queries.csv").exists()


def test_rerun_is_all_cache_hits(smoke_run):
    tmp, cfg_path = smoke_run
    out = tmp / "out"
    before = {p: p.read_bytes() for p in out.rglob("*") if p.is_file() and p.name != "run_manifest.json"}
    assert cli.main(["pipeline", "--config", str(cfg_path), "--out-dir", str(out)]) == 0
    man = json.loads((out / "run_manifest.json").read_text())
    assert all(s["cache_hit"] for s in man["stages"])
    after = {p: p.read_bytes() for p in out.rglob("*") if p.is_file() and p.name != "run_manifest.json"}
    assert before == after


def test_changed_nu_reuses_data(smoke_run):
    tmp, _ = smoke_run
    cfg = dict(SMOKE, reservoir=dict(nx=24, ny=24, nu=0.04))
    p = _write(tmp, cfg, "nu.json")
    assert cli.main(["pipeline", "--config", str(p), "--out-dir", str(tmp / "out")]) == 0
    man = json.loads((tmp / "out" / "run_manifest.json").read_text())
    hits = {s["stage"]: s["cache_hit"] for s in man["stages"]}
    assert hits == {"gen-data": True, "run-reservoir": False, "train": False, "evaluate": False, "analyze": False}


def test_forced_rerun_is_bit_identical(smoke_run):
    tmp, cfg_path = smoke_run
    out = tmp / "out"
    model_dir = next(d for d in (out / "models").iterdir() if json.loads((d / "train.json").read_text())["config_hash"] == cli.model_key(load_config(cfg_path)))
    before = (model_dir / "model.bin").read_bytes()
    assert cli.main(["pipeline", "--config", str(cfg_path), "--out-dir", str(out), "--force", "--threads", "1"]) == 0
    assert (model_dir / "model.bin").read_bytes() == before


def _paths(tmp):
    out = tmp / "out"
    cfg = load_config(tmp / "cfg.json")
    manifest = out / "data" / cli.data_key(cfg) / "manifest.json"
    store = out / "reservoir" / cli.store_key(cfg) / "store.bin"
    return manifest, store


def test_train_and_evaluate_subcommands(smoke_run, capsys):
    tmp, cfg_path = smoke_run
    manifest, store = _paths(tmp)
    ckpt = tmp / "lin.bin"
    args = ["train", "--config", str(cfg_path), "--model", "linear", "--data", str(manifest), "--store", str(store), "--out", str(ckpt)]
    assert cli.main(args) == 0
    assert ckpt.exists() and (tmp / "lin.history.csv").exists()
    capsys.readouterr()
    assert cli.main(["evaluate", "--config", str(cfg_path), "--checkpoint", str(ckpt), "--data", str(manifest), "--store", str(store)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["kind"] == "linear" and summary["params"] == 9
    # delay-MLP needs no store
    args = ["train", "--config", str(cfg_path), "--model", "delay-mlp", "--data", str(manifest), "--out", str(tmp / "d.bin")]
    assert cli.main(args) == 0


def test_analyze_subcommands(smoke_run):
    tmp, cfg_path = smoke_run
    manifest, store = _paths(tmp)
    ckpt = next((tmp / "out" / "models").glob("asaerc-*/model.bin"))
    for what in ("correlations", "queries"):
        code = cli.main(["analyze", what, "--config", str(cfg_path), "--checkpoint", str(ckpt), "--data", str(manifest), "--store", str(store), "--out-dir", str(tmp / "an")])
        assert code == 0
    assert list((tmp / "an").rglob("queries.csv"))


def test_sweep_subcommand(tmp_path):
    cfg = dict(SMOKE, analysis=dict(sweep_models=["linear", "aerc"], sweep_n_fix=[4], sweep_n=[4], sweep_seeds=[0]))
    p = _write(tmp_path, cfg)
    assert cli.main(["sweep", "--config", str(p), "--out-dir", str(tmp_path / "out")]) == 0
    sweep_csv = next((tmp_path / "out" / "sweeps").rglob("sweep.csv"))
    rows = list(csv.DictReader(open(sweep_csv)))
    assert {r["model"] for r in rows} == {"linear", "aerc"}
    assert {r["metric"] for r in rows} >= {"test_mse", "mse:Lorenz"}


def test_exit_codes(tmp_path, smoke_run):
    bad = _write(tmp_path, {"nope": 1}, "bad.json")
    assert cli.main(["pipeline", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["pipeline", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--config", str(bad)])
    assert e.value.code == cli.EXIT_USAGE

    # store from one reservoir config consumed under another
    tmp, _ = smoke_run
    manifest, store = _paths(tmp)
    other = _write(tmp_path, dict(SMOKE, reservoir=dict(nx=24, ny=24, nu=0.03)), "other.json")
    args = ["train", "--config", str(other), "--model", "linear", "--data", str(manifest), "--store", str(store), "--out", str(tmp_path / "x.bin")]
    assert cli.main(args) == cli.EXIT_MISMATCH

    # data generated under different data settings
    other = _write(tmp_path, dict(SMOKE, data=dict(systems=["Lorenz"], n_samples=300)), "d.json")
    args[2] = str(other)
    assert cli.main(args) == cli.EXIT_MISMATCH

    # a reservoir failure maps to its own code
    unstable = _write(tmp_path, dict(SMOKE, reservoir=dict(nx=24, ny=24, input_gain=1e12)), "u.json")
    assert cli.main(["run-reservoir", "--config", str(unstable), "--out-dir", str(tmp_path / "o")]) == cli.EXIT_RESERVOIR


def test_distinct_stage_codes():
    codes = [cli.EXIT_CONFIG, cli.EXIT_DATA, cli.EXIT_RESERVOIR, cli.EXIT_TRAIN, cli.EXIT_EVALUATE, cli.EXIT_ANALYZE, cli.EXIT_MISMATCH]
    assert len(set(codes)) == len(codes) and 0 not in codes
