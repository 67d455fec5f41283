import numpy as np
import pytest

from uamoc import model as M


def hexa_doc(arm=True):
    """Planar hexacopter, optionally with a 3-joint pendulum arm."""
    rotors = []
    for i in range(6):
        a = np.pi / 6 + i * np.pi / 3
        rotors.append({
            "position": [0.37 * np.cos(a), 0.37 * np.sin(a), 0.0],
            "axis_rotation": [0.0, 0.0, 0.0],
            "ccw": i % 2 == 0,
            "cm_over_cf": 0.016,
            "max_thrust": 8.0,
        })
    doc = {
        "name": "hexa-test",
        "base": {"mass": 2.0,
                 "inertia": [0.02, 0.0, 0.0, 0.02, 0.0, 0.035],
                 "rotors": rotors},
        "frames": [{"name": "ee", "parent": "link3" if arm else "base",
                    "xyz": [0.0, 0.0, -0.09] if arm else [0.0, 0.0, 0.0],
                    "rpy": [0.0, 0.0, 0.0]}],
    }
    if arm:
        doc["arm"] = {"joints": [
            {"xyz": [0.10, 0.0, -0.05], "rpy": [0.0, 0.0, 0.0], "axis": [0.0, 1.0, 0.0],
             "mass": 0.25, "com": [0.0, 0.0, -0.06],
             "inertia": [4e-4, 0.0, 0.0, 4e-4, 0.0, 1e-4], "torque_limit": 6.0},
            {"xyz": [0.0, 0.0, -0.12], "rpy": [0.0, 0.0, 0.0], "axis": [0.0, 1.0, 0.0],
             "mass": 0.20, "com": [0.0, 0.0, -0.05],
             "inertia": [3e-4, 0.0, 0.0, 3e-4, 0.0, 8e-5], "torque_limit": 6.0},
            {"xyz": [0.0, 0.0, -0.10], "rpy": [0.0, 0.0, 0.0], "axis": [1.0, 0.0, 0.0],
             "mass": 0.10, "com": [0.0, 0.0, -0.04],
             "inertia": [1.5e-4, 0.0, 0.0, 1.5e-4, 0.0, 5e-5], "torque_limit": 4.0},
        ]}
    return doc


@pytest.fixture(scope="session")
def hexarm():
    return M.load_model(hexa_doc(arm=True))


@pytest.fixture(scope="session")
def hexbare():
    return M.load_model(hexa_doc(arm=False))


def random_state(model, rng, vel_scale=0.7):
    return model.pack_state(
        position=rng.normal(0.0, 1.0, 3),
        quat=rng.normal(0.0, 1.0, 4),
        joints=rng.normal(0.0, 0.8, model.n_joints) if model.n_joints else None,
        velocity=rng.normal(0.0, vel_scale, model.nv))
