"""Command line behavior: outputs, exit codes, validation paths."""

import json

import numpy as np
import pytest
import yaml

from uamoc import cli as CLI
from uamoc import mpc as C

from conftest import hexa_doc


def tiny_mission_doc():
    return {
        "name": "tiny-hover",
        "model": hexa_doc(arm=False),
        "dt": 0.02,
        "integrator": "rk4",
        "initial": {"position": [0.0, 0.0, 1.0]},
        "controller": {"strategy": "weighted"},
        "simulation": {"duration": 0.12, "plant_dt": 0.001},
        "phases": [
            {"name": "hold", "duration": 0.4, "costs": [
                {"name": "track", "kind": "state", "weight": 1.0, "spread": 0.1,
                 "target": {"position": [0, 0, 1]}},
                {"name": "effort", "kind": "control", "weight": 1e-3,
                 "spread": 1.0, "target": "hover"},
            ]},
        ],
    }


def campaign_mission_doc():
    doc = tiny_mission_doc()
    doc["name"] = "tiny-campaign"
    hold = doc["phases"][0]["costs"]
    doc["phases"] = [
        {"name": "approach", "duration": 0.2, "costs": hold},
        {"name": "tap", "instantaneous": True, "costs": [
            {"name": "reach", "kind": "frame_position", "frame": "ee",
             "weight": 100.0, "spread": 1.0, "target": [0.02, 0.0, 1.0]}]},
        {"name": "retreat", "duration": 0.2, "costs": hold},
    ]
    doc["disturbance"] = {
        "magnitude_mean": 2.0, "magnitude_std": 0.5,
        "duration_mean": 0.04, "duration_std": 0.01, "duration_min": 0.02,
        "windows": {"early": [0.03, 0.06]},
        "mc_duration": 0.26,
    }
    return doc


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def write_mission(tmp_path, doc, name="mission.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(_plain(doc)))
    return str(p)


def test_validate_mission_and_model(tmp_path, capsys):
    path = write_mission(tmp_path, tiny_mission_doc())
    assert CLI.main(["validate", "--mission", path]) == 0
    out = capsys.readouterr().out
    assert "tiny-hover" in out
    assert "controller: weighted" in out
    assert CLI.main(["validate", "--model", "hexa370_arm3"]) == 0
    out = capsys.readouterr().out
    assert "3 joints" in out


def test_validate_rejects_bad_mission(tmp_path, capsys):
    doc = tiny_mission_doc()
    doc["phases"][0]["duration"] = 0.41  # not a multiple of dt
    path = write_mission(tmp_path, doc)
    assert CLI.main(["validate", "--mission", path]) == CLI.EXIT_VALIDATION
    assert "validation error" in capsys.readouterr().err


def test_unresolvable_mission_is_validation_error(capsys):
    assert CLI.main(["validate", "--mission", "no_such_mission"]) == CLI.EXIT_VALIDATION
    assert "validation error" in capsys.readouterr().err


def test_to_writes_plan(tmp_path, capsys):
    path = write_mission(tmp_path, tiny_mission_doc())
    out = tmp_path / "plan.csv"
    assert CLI.main(["to", "--mission", path, "--out", str(out)]) == 0
    assert out.exists()
    ref = C.ReferenceTrajectory.from_csv(out, 0)
    assert ref.duration == pytest.approx(0.4)
    # written controls are physical thrusts, not pre-squash variables
    assert np.all(ref.controls >= 0.0)
    assert np.all(ref.controls <= 8.0)
    assert abs(ref.controls.mean() - 3.27) < 0.5  # near hover thrust
    assert "converged=True" in capsys.readouterr().out


def test_mpc_writes_log_and_perf(tmp_path, capsys):
    path = write_mission(tmp_path, tiny_mission_doc())
    out = tmp_path / "run.csv"
    perf = tmp_path / "perf.json"
    rc = CLI.main(["mpc", "--mission", path, "--out", str(out),
                   "--perf", str(perf)])
    assert rc == 0
    assert out.exists()
    doc = json.loads(perf.read_text())
    assert doc["sim_s"] == pytest.approx(0.12)
    assert doc["failures"] == 0
    assert doc["wall_s"] > 0.0


def test_mpc_bad_disturb_spec(tmp_path, capsys):
    path = write_mission(tmp_path, tiny_mission_doc())
    rc = CLI.main(["mpc", "--mission", path, "--disturb", "0.1,0.05"])
    assert rc == CLI.EXIT_VALIDATION
    assert "t_start,duration" in capsys.readouterr().err


def test_mpc_bad_set_override(tmp_path, capsys):
    path = write_mission(tmp_path, tiny_mission_doc())
    rc = CLI.main(["mpc", "--mission", path, "--set", "no_such_knob=1"])
    assert rc == CLI.EXIT_VALIDATION


def test_montecarlo_threshold_exit_codes(tmp_path, capsys):
    path = write_mission(tmp_path, campaign_mission_doc())
    out = tmp_path / "mc.json"
    rc = CLI.main(["montecarlo", "--mission", path, "--runs", "1",
                   "--seed", "5", "--threshold", "10.0", "--out", str(out)])
    assert rc == 0
    doc = json.loads(out.read_text())
    assert doc["completion_rate"] == 1.0
    assert len(doc["runs"]) == 1
    assert doc["summary"]["early"]["err_pos_median"] >= 0.0
    # an impossible completion radius trips the campaign exit code
    rc = CLI.main(["montecarlo", "--mission", path, "--runs", "1",
                   "--seed", "5", "--threshold", "1e-9",
                   "--out", str(tmp_path / "mc2.json")])
    assert rc == CLI.EXIT_CAMPAIGN
