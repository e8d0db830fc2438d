import json

import numpy as np
import pytest

from brenierlab.cli import build_parser, dump_instance, load_config, load_instance, main, make_coupling
from brenierlab.coupling import random_bistochastic
from brenierlab.experiments import config_hash
from brenierlab.fields import DensityPath
from brenierlab.torus import TorusGrid


def test_parser_lists_subcommands():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    assert set(sub.choices) == {
        "action-holder",
        "pressure-holder",
        "counterexample",
        "diameter",
        "solve",
        "surgery",
        "dacmoser",
    }


def test_config_formats(tmp_path):
    (tmp_path / "c.toml").write_text('n = 4\nsolver = "entropic"\n')
    (tmp_path / "c.json").write_text('{"n": 4, "solver": "entropic"}')
    assert load_config(tmp_path / "c.toml") == load_config(tmp_path / "c.json")
    assert load_config(None) == {}


def test_coupling_specs():
    g = TorusGrid(1, 4)
    assert make_coupling("shift:2", g, 0).mass[0, 2] == pytest.approx(0.25)
    np.testing.assert_allclose(make_coupling("random", g, 7).mass, random_bistochastic(g, 7).mass)
    with pytest.raises(ValueError):
        make_coupling("swap", g, 0)


def test_instance_roundtrip(tmp_path):
    g = TorusGrid(1, 4)
    gamma = random_bistochastic(g, 1)
    rho = DensityPath.uniform(g, 2)
    (tmp_path / "i.json").write_text(dump_instance(gamma, rho))
    gamma2, rho2 = load_instance(tmp_path / "i.json")
    np.testing.assert_allclose(gamma2.mass, gamma.mass)
    np.testing.assert_allclose(rho2.frames, rho.frames)


def test_solve_writes_outputs(tmp_path, capsys):
    cfg = tmp_path / "solve.toml"
    cfg.write_text('gamma = "shift:2"\nsteps = 2\n')
    assert main(["solve", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["action"] == pytest.approx(0.125)
    manifest = json.loads((tmp_path / "solve_manifest.json").read_text())
    assert manifest["config_hash"] == config_hash(manifest["config"])
    assert (tmp_path / "solve_pressure.csv").read_text().startswith("t,cell,value")


def test_flags_override_config(tmp_path, capsys):
    cfg = tmp_path / "solve.json"
    cfg.write_text('{"gamma": "shift:2", "steps": 2}')
    main(["solve", "--config", str(cfg), "--gamma", "identity", "--out-dir", str(tmp_path)])
    assert json.loads(capsys.readouterr().out)["action"] == 0.0


def test_surgery_and_dacmoser(tmp_path, capsys):
    assert main(["surgery", "--steps", "2", "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "surgery_flow.csv").exists()
    assert main(["dacmoser", "--n", "16", "--out-dir", str(tmp_path)]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["max_w1"] <= 2 * summary["spacing"]


def test_experiment_subcommand(tmp_path, capsys):
    assert main(["counterexample", "--seed", "5", "--out-dir", str(tmp_path), "--strict"]) == 0
    manifest = json.loads((tmp_path / "counterexample_manifest.json").read_text())
    assert manifest["seed"] == 5
