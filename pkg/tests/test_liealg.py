"""Manifold primitives: group operations, exp/log, Jacobians, state arithmetic."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uamoc import liealg as L
from uamoc import kernels as K
from uamoc.errors import AngleNearPi

rng = np.random.default_rng(42)


def bounded_tangent(v, cap=3.0):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v[3:6])
    if n > cap:
        v[3:6] *= cap / n
    return v


def series_se3_exp(tau, terms=40):
    """Matrix power series of the homogeneous twist, independent of the library."""
    A = np.zeros((4, 4))
    A[:3, :3] = np.array([[0, -tau[5], tau[4]], [tau[5], 0, -tau[3]],
                          [-tau[4], tau[3], 0]])
    A[:3, 3] = tau[:3]
    out = np.eye(4)
    term = np.eye(4)
    for k in range(1, terms):
        term = term @ A / k
        out = out + term
    return out


def pose_matrix(pose):
    T = np.eye(4)
    T[:3, :3] = pose.rotation
    T[:3, 3] = pose.trans
    return T


def test_exp_matches_power_series():
    for _ in range(100):
        tau = bounded_tangent(rng.normal(0.0, 1.2, 6))
        assert np.abs(pose_matrix(L.exp(tau)) - series_se3_exp(tau)).max() < 1e-12


def test_exp_log_round_trip():
    for _ in range(200):
        tau = bounded_tangent(rng.normal(0.0, 1.2, 6))
        assert np.abs(L.log(L.exp(tau)) - tau).max() < 1e-9


def test_log_exp_round_trip_on_poses():
    for _ in range(200):
        p = L.Pose(rng.normal(0.0, 1.0, 4), rng.normal(0.0, 2.0, 3))
        q = L.exp(L.log(p))
        assert np.abs(q.trans - p.trans).max() < 1e-10
        # quaternions are defined up to sign
        assert min(np.abs(q.quat - p.quat).max(), np.abs(q.quat + p.quat).max()) < 1e-10


def test_group_axioms():
    for _ in range(50):
        a = L.Pose(rng.normal(0, 1, 4), rng.normal(0, 1, 3))
        b = L.Pose(rng.normal(0, 1, 4), rng.normal(0, 1, 3))
        ab = a @ b
        assert np.abs((ab.inverse() @ a).trans - b.inverse().trans).max() < 1e-10
        ident = a @ a.inverse()
        assert np.abs(ident.trans).max() < 1e-12
        assert abs(abs(ident.quat[0]) - 1.0) < 1e-12
        # action on points agrees with composition
        pt = rng.normal(0, 1, 3)
        assert np.abs(ab.act(pt) - a.act(b.act(pt))).max() < 1e-10


def test_small_angle_branches():
    # spans both sides of the Taylor crossover for the Jacobian coefficients
    for s in (1e-12, 1e-9, 1e-7, 1e-5, 1e-4, 5e-4, 2e-3, 1e-2):
        tau = np.array([0.3, -0.2, 0.1, s, -s, s / 2])
        assert np.abs(pose_matrix(L.exp(tau)) - series_se3_exp(tau)).max() < 1e-13
        assert np.abs(L.log(L.exp(tau)) - tau).max() < 1e-12


def test_log_raises_near_pi():
    axis = np.array([1.0, 0.0, 0.0])
    with pytest.raises(AngleNearPi):
        L.so3_log(L.so3_exp(axis * (np.pi - 1e-9)))
    # just inside the guard band is fine
    w = L.so3_log(L.so3_exp(axis * (np.pi - 1e-5)))
    assert np.abs(w - axis * (np.pi - 1e-5)).max() < 1e-8


def test_so3_left_jacobian_inverse():
    for _ in range(50):
        w = rng.normal(0.0, 0.9, 3)
        J = K.so3_left_jac(np.ascontiguousarray(w))
        Ji = L.so3_left_jac_inv(w)
        assert np.abs(J @ Ji - np.eye(3)).max() < 1e-11


def test_se3_left_jacobian_inverse_matches_finite_differences():
    # d/dd Log(Exp(-d) X) at d=0 equals -Jl_inv(Log X)
    h = 1e-6
    worst = 0.0
    for _ in range(30):
        tau = bounded_tangent(rng.normal(0.0, 0.9, 6), cap=2.5)
        X = L.exp(tau)
        Ji = L.se3_left_jac_inv(tau)
        num = np.zeros((6, 6))
        for j in range(6):
            d = np.zeros(6)
            d[j] = h
            rp = L.log(L.exp(-d) @ X)
            rm = L.log(L.exp(d) @ X)
            num[:, j] = (rp - rm) / (2 * h)
        worst = max(worst, np.abs(-Ji - num).max())
    assert worst < 1e-5


def test_rpy_round_trip():
    for _ in range(100):
        rpy = rng.uniform(-1.4, 1.4, 3)
        R = L.rpy_to_rot(rpy)
        assert np.abs(R @ R.T - np.eye(3)).max() < 1e-12
        assert np.abs(L.rot_to_rpy(R) - rpy).max() < 1e-9


def test_quat_rot_round_trip_all_shepperd_branches():
    cases = [np.array([0.0, 0.0, 0.0])]
    for axis in np.eye(3):
        cases.append(axis * 3.1)  # near-pi rotations exercise every branch
    for _ in range(50):
        cases.append(rng.normal(0.0, 1.5, 3))
    for w in cases:
        R = L.so3_exp(w)
        q = K.rot_to_quat(np.ascontiguousarray(R))
        assert np.abs(K.quat_to_rot(q) - R).max() < 1e-12
        assert abs(np.linalg.norm(q) - 1.0) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2.0, 2.0), min_size=6, max_size=6),
       st.lists(st.floats(-2.0, 2.0), min_size=6, max_size=6))
def test_exp_log_property(a, b):
    ta = bounded_tangent(np.array(a), cap=2.8)
    tb = bounded_tangent(np.array(b), cap=2.8)
    X = L.exp(ta) @ L.exp(tb)
    Y = L.exp(L.log(X))
    assert np.abs(Y.trans - X.trans).max() < 1e-9
    assert min(np.abs(Y.quat - X.quat).max(), np.abs(Y.quat + X.quat).max()) < 1e-9


NJ = 3


def rand_full_state(scale=1.0):
    x = np.zeros(13 + 2 * NJ)
    x[0:3] = rng.normal(0, scale, 3)
    x[3:7] = K.quat_normalize(np.ascontiguousarray(rng.normal(0, 1, 4)))
    x[7:7 + NJ] = rng.normal(0, scale, NJ)
    x[7 + NJ:] = rng.normal(0, scale, 6 + NJ)
    return x


def test_state_oplus_ominus_round_trip():
    for _ in range(100):
        x = rand_full_state()
        dx = rng.normal(0.0, 0.8, 2 * (6 + NJ))
        n = np.linalg.norm(dx[3:6])
        if n > 2.8:  # keep the pose increment inside the principal branch
            dx[3:6] *= 2.8 / n
        y = L.state_oplus(x, dx, NJ)
        back = L.state_ominus(y, x, NJ)
        assert np.abs(back - dx).max() < 1e-9
        # oplus of zero is identity
        assert np.abs(L.state_oplus(x, np.zeros(2 * (6 + NJ)), NJ) - x).max() < 1e-14


def test_state_ominus_oplus_round_trip():
    for _ in range(100):
        x = rand_full_state()
        y = rand_full_state()
        dx = L.state_ominus(y, x, NJ)
        z = L.state_oplus(x, dx, NJ)
        assert np.abs(z[0:3] - y[0:3]).max() < 1e-10
        assert min(np.abs(z[3:7] - y[3:7]).max(), np.abs(z[3:7] + y[3:7]).max()) < 1e-10
        assert np.abs(z[7:] - y[7:]).max() < 1e-10


def test_interpolate_endpoints_and_midpoint():
    x = rand_full_state()
    y = rand_full_state()
    assert np.abs(L.interpolate(x, y, 0.0, NJ) - x).max() < 1e-12
    mid = L.interpolate(x, y, 0.5, NJ)
    # midpoint is equidistant on the tangent
    da = L.state_ominus(mid, x, NJ)
    db = L.state_ominus(y, mid, NJ)
    assert np.abs(da - db).max() < 1e-9
    end = L.interpolate(x, y, 1.0, NJ)
    assert np.abs(end[0:3] - y[0:3]).max() < 1e-10
    # pure translation interpolates linearly
    a = np.zeros(13)
    a[3] = 1.0
    b = a.copy()
    b[0:3] = (2.0, -4.0, 6.0)
    m = L.interpolate(a, b, 0.25, 0)
    assert np.abs(m[0:3] - np.array([0.5, -1.0, 1.5])).max() < 1e-12
