import dataclasses
import json

from lskkf import cli, oracle
from lskkf.cli import main
from lskkf.config import (
    ExperimentConfig,
    build_material_config,
    config_digest,
    parse_config,
    resolve_config,
    resolve_thread_count,
    to_dict,
    with_observer_params,
)
from lskkf.errors import ConfigError
from lskkf.fields import Grid, ScalarField, read_field_csv, read_pgm, read_sf1, write_sf1

import numpy as np
import pytest

TINY = {
    "grid": {"shape": [8, 8]},
    "model": {"steps": 2},
    "observers": [{"type": "lskkf"}],
}


def write_config(path, data: dict):
    path.write_text(json.dumps(data))
    return path


# Config =======================================================================
def test_minimal_config_resolves_to_defaults():
    assert resolve_config({}) == ExperimentConfig()
    assert [o.name for o in ExperimentConfig().observers] == ["lskkf", "enkf20", "enkf100", "romkf", "luenberger"]


def test_invalid_values_name_the_key():
    with pytest.raises(ConfigError, match="model.dt"):
        resolve_config({"model": {"dt": -1}})
    with pytest.raises(ConfigError, match="gird"):
        resolve_config({"gird": {"shape": [4, 4]}})
    with pytest.raises(ConfigError, match="observers.enkf.gamma"):
        resolve_config({"observers": [{"type": "enkf", "gamma": 1.0}]})
    with pytest.raises(ConfigError, match="observers"):
        resolve_config({"observers": [{"type": "lskkf"}, {"type": "lskkf"}]})
    with pytest.raises(ConfigError, match="profile"):
        resolve_config({"profile": "huge"})


def test_counts_must_be_integers():
    bad = [
        ({"model": {"steps": 3.5}}, "model.steps"),
        ({"model": {"snapshot_step": 1.0}}, "model.snapshot_step"),
        ({"grid": {"shape": [8.0, 8]}}, "grid.shape"),
        ({"design": {"shape": [8, True]}}, "design.shape"),
        ({"bench": {"sizes": [64.0, 128]}}, "bench.sizes"),
        ({"bench": {"steps": 5.5}}, "bench.steps"),
        ({"bench": {"ensemble_sizes": [3, 4.0]}}, "bench.ensemble_sizes"),
        ({"observers": [{"type": "enkf", "members": True}]}, "observers.enkf.members"),
        ({"seed": 1.5}, "seed"),
    ]
    for data, key in bad:
        with pytest.raises(ConfigError, match=key):
            resolve_config(data)


def test_profiles_and_overrides():
    assert resolve_config({"profile": "small"}).grid.shape == (32, 32)
    assert resolve_config({"profile": "small", "grid": {"shape": [20, 20]}}).grid.shape == (20, 20)
    cfg = resolve_config({"seed": 1}, seed=5, out_dir="elsewhere", profile=None)
    assert cfg.seed == 5 and cfg.out_dir == "elsewhere" and cfg.profile == "default"


def test_round_trip_and_digest():
    cfg = resolve_config(
        {
            "seed": 11,
            "grid": {"shape": [16, 12]},
            "noise": {"r_overrides": {"3": 0.1}},
            "observers": [{"type": "lskkf", "gamma": 0.4, "sigma": 0.005}, {"type": "enkf", "members": 7}],
        }
    )
    again = resolve_config(json.loads(json.dumps(to_dict(cfg))))
    assert again == cfg
    assert config_digest(again) == config_digest(cfg)
    assert config_digest(dataclasses.replace(cfg, out_dir="other")) == config_digest(cfg)
    assert config_digest(dataclasses.replace(cfg, seed=12)) != config_digest(cfg)


def test_with_observer_params():
    cfg = with_observer_params(ExperimentConfig(), "lskkf", gamma=0.3, sigma=0.01)
    lskkf = cfg.observers[0]
    assert lskkf.param("gamma") == 0.3 and lskkf.param("sigma") == 0.01
    assert cfg.observers[1:] == ExperimentConfig().observers[1:]


def test_thread_count_from_environment():
    assert resolve_thread_count({"LSKKF_THREADS": "3"}) == 3
    assert resolve_thread_count({}) >= 1
    for bad in ("-1", "many"):
        with pytest.raises(ConfigError, match="LSKKF_THREADS"):
            resolve_thread_count({"LSKKF_THREADS": bad})


def test_parse_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="--config"):
        parse_config(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError, match="--config"):
        parse_config(broken)


def test_label_runs_must_cover_the_grid():
    cfg = resolve_config({"grid": {"shape": [4, 4]}, "layout": {"kind": "labels", "runs": [[0, 10]]}})
    with pytest.raises(ConfigError, match="layout.runs"):
        build_material_config(cfg)
    ok = resolve_config({"grid": {"shape": [4, 4]}, "layout": {"kind": "labels", "runs": [[0, 10], [1, 6]]}})
    material = build_material_config(ok)
    assert list(material.labels[:10]) == [0] * 10
    assert all(material.labels[f] == 0 for f in material.foci)


# CLI ==========================================================================
def test_usage_errors_exit_one(tmp_path):
    assert main([]) == 1
    assert main(["run", "--bogus"]) == 1
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 1


def test_run_refuses_foreign_output_directory(tmp_path, capsys):
    config = write_config(tmp_path / "tiny.json", TINY)
    out = tmp_path / "out"
    assert main(["run", "--config", str(config), "--out", str(out), "--seed", "1"]) == 0
    stored = json.loads((out / "config.json").read_text())
    assert stored["digest"] == config_digest(parse_config(config, seed=1))
    assert "lskkf: total RMS" in capsys.readouterr().out

    assert main(["run", "--config", str(config), "--out", str(out), "--seed", "1"]) == 0, "same config may rerun"
    assert main(["run", "--config", str(config), "--out", str(out), "--seed", "2"]) == 1
    assert main(["run", "--config", str(config), "--out", str(out), "--seed", "2", "--force"]) == 0
    assert json.loads((out / "config.json").read_text())["config"]["seed"] == 2


def test_cond_exp_with_identity_kernel_is_a_spike(tmp_path):
    config = write_config(
        tmp_path / "ident.json",
        {"grid": {"shape": [6, 5]}, "observers": [{"type": "lskkf", "kernel": "identity", "gamma": 1.0}]},
    )
    output = tmp_path / "spike.sf1"
    assert main(["cond-exp", "--config", str(config), "--index", "7", "--value", "2.5", "--output", str(output)]) == 0
    fld = read_sf1(output)
    expected = np.zeros(30)
    expected[7] = 2.5
    np.testing.assert_array_equal(fld.values, expected)
    assert main(["cond-exp", "--config", str(config), "--index", "30", "--output", str(output)]) == 1


def test_export_converts_between_formats(tmp_path):
    grid = Grid((3, 4), (0.01, 0.02))
    fld = ScalarField(grid, np.arange(12.0))
    source = write_sf1(fld, tmp_path / "field.sf1")
    assert main(["export", "--input", str(source), "--output", str(tmp_path / "field.csv"), "--format", "csv"]) == 0
    back = read_field_csv(tmp_path / "field.csv")
    np.testing.assert_allclose(back.values, fld.values)
    assert back.grid.shape == (3, 4)
    csv_in = str(tmp_path / "field.csv")
    assert main(["export", "--input", csv_in, "--output", str(tmp_path / "field.pgm"), "--format", "pgm"]) == 0
    image = read_pgm(tmp_path / "field.pgm")
    assert image.shape == (3, 4)
    assert main(["export", "--input", str(tmp_path / "nope.sf1"), "--output", str(tmp_path / "x.sf1")]) == 1


def test_design_kernel_updates_config(tmp_path, capsys):
    data = {**TINY, "design": {"shape": [8, 8], "gammas": [0.2, 0.4], "sigmas": [0.005]}}
    config = write_config(tmp_path / "design.json", data)
    assert main(["design-kernel", "--config", str(config), "--update-config", "--table"]) == 0
    fitted = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert fitted["gamma"] in (0.2, 0.4) and fitted["sigma"] == 0.005
    lskkf = parse_config(config).observers[0]
    assert (lskkf.param("gamma"), lskkf.param("sigma")) == (fitted["gamma"], fitted["sigma"])
    assert main(["design-kernel", "--update-config"]) == 1


def test_design_kernel_uses_configured_probe_count(tmp_path, monkeypatch):
    seen = []
    real_score = cli.score_kernel_candidates

    def recording(model, gammas, sigmas, P_inf=None, probes=None, threads=1):
        seen.append(np.asarray(probes))
        return real_score(model, gammas, sigmas, P_inf, probes, threads)

    monkeypatch.setattr(cli, "score_kernel_candidates", recording)
    for per_material in (1, 3):
        design = {"shape": [8, 8], "gammas": [0.2], "sigmas": [0.005, 0.01], "probes_per_material": per_material}
        config = write_config(tmp_path / f"design{per_material}.json", {**TINY, "design": design})
        assert main(["design-kernel", "--config", str(config), "--table"]) == 0
    one, three = seen
    assert one.size <= 2
    assert three.size > one.size


def test_design_kernel_table_solves_riccati_once(tmp_path, monkeypatch, capsys):
    calls = []
    real_riccati = oracle.riccati_steady_state

    def counting(*args, **kwargs):
        calls.append(1)
        return real_riccati(*args, **kwargs)

    monkeypatch.setattr(oracle, "riccati_steady_state", counting)
    data = {**TINY, "design": {"shape": [8, 8], "gammas": [0.2, 0.4], "sigmas": [0.005, 0.01]}}
    config = write_config(tmp_path / "design.json", data)
    assert main(["design-kernel", "--config", str(config), "--table"]) == 0
    assert len(calls) == 1
    lines = capsys.readouterr().out.strip().splitlines()
    fitted = json.loads(lines[-1])
    assert len(lines) == 1 + 4 + 1, "header, one row per candidate, then the fit"
    assert fitted["gamma"] in (0.2, 0.4) and fitted["sigma"] in (0.005, 0.01)


def test_fractional_counts_exit_one(tmp_path, capsys):
    for section, key in (("model", "steps"), ("grid", "shape"), ("design", "probes_per_material")):
        value = [8, 7.5] if key == "shape" else 3.5
        data = {**TINY, section: {**TINY.get(section, {}), key: value}}
        config = write_config(tmp_path / f"{section}.json", data)
        assert main(["run", "--config", str(config), "--out", str(tmp_path / section)]) == 1
        assert f"{section}.{key}" in capsys.readouterr().err
