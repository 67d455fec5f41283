"""Robot model: configuration, kinematics, dynamics and contact consistency."""

import numpy as np
import pytest
from scipy.linalg import null_space

from uamoc import kernels as K
from uamoc import model as M
from uamoc.errors import ContactRankError, ModelConfigError

from conftest import hexa_doc, random_state

rng = np.random.default_rng(3)


# -- configuration ----------------------------------------------------------

def test_dimensions(hexarm, hexbare):
    assert (hexarm.nx, hexarm.nv, hexarm.nu) == (19, 9, 9)
    assert (hexbare.nx, hexbare.nv, hexbare.nu) == (13, 6, 6)
    assert hexarm.total_mass == pytest.approx(2.55)
    assert hexarm.control_lower[:6] == pytest.approx(np.zeros(6))
    assert hexarm.control_upper[:6] == pytest.approx(np.full(6, 8.0))
    assert hexarm.control_lower[6:] == pytest.approx([-6.0, -6.0, -4.0])


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d["base"].update(mass=-1.0), "mass"),
    (lambda d: d["base"].update(inertia=[1e-3, 0, 0, 1e-3, 0, -1e-3]), "positive definite"),
    (lambda d: d["base"]["rotors"][0].update(max_thrust=0.0), "max_thrust"),
    (lambda d: d["base"]["rotors"][0].update(ccw="yes"), "ccw"),
    (lambda d: d["base"]["rotors"][0].update(cm_over_cf=-0.1), "cm_over_cf"),
    (lambda d: d["arm"]["joints"][0].update(axis=[0, 0, 0]), "axis"),
    (lambda d: d["arm"]["joints"][1].update(torque_limit=0.0), "torque_limit"),
    (lambda d: d["arm"]["joints"][2].update(mass=0.0), "mass"),
    (lambda d: d["frames"][0].update(parent="link9"), "parent"),
    (lambda d: d.update(extra_section=1), "unknown"),
    (lambda d: d["base"]["rotors"][0].update(tilt=0.2), "unknown"),
    (lambda d: d.pop("base"), "base"),
])
def test_config_validation(mutate, message):
    doc = hexa_doc(arm=True)
    mutate(doc)
    with pytest.raises(ModelConfigError, match=message):
        M.load_model(doc)


def test_duplicate_frame_rejected():
    doc = hexa_doc(arm=True)
    doc["frames"].append(dict(doc["frames"][0]))
    with pytest.raises(ModelConfigError, match="duplicate"):
        M.load_model(doc)


def test_unknown_frame_lookup(hexarm):
    with pytest.raises(ModelConfigError, match="gripper"):
        hexarm.frame_id("gripper")


# -- actuation ----------------------------------------------------------------

def test_actuation_planar_hexacopter(hexbare):
    G = M.actuation_matrix(hexbare)
    # coplanar thrust axes cannot produce lateral body force
    assert np.abs(G[0:2, :]).max() == 0.0
    assert G[2, :] == pytest.approx(np.ones(6))
    r0 = hexbare.rotors[0]
    expected = np.concatenate([
        [0.0, 0.0, 1.0],
        np.cross(r0.position, [0.0, 0.0, 1.0]) - 0.016 * np.array([0.0, 0.0, 1.0])])
    assert G[:, 0] == pytest.approx(expected)
    # cw rotor drags the opposite way around the thrust axis
    assert G[5, 1] == pytest.approx(np.cross(hexbare.rotors[1].position, [0, 0, 1])[2] + 0.016)


def test_actuation_tilted_rotor():
    doc = hexa_doc(arm=False)
    doc["base"]["rotors"] = [
        {"position": [0.2, 0.0, 0.0], "axis_rotation": [0.3, -0.1, 0.0],
         "ccw": True, "cm_over_cf": 0.02, "max_thrust": 5.0}]
    m = M.load_model(doc)
    from uamoc import liealg as L
    axis = L.rpy_to_rot([0.3, -0.1, 0.0]) @ np.array([0.0, 0.0, 1.0])
    g = M.actuation_matrix(m)[:, 0]
    assert g[0:3] == pytest.approx(axis)
    assert g[3:6] == pytest.approx(np.cross([0.2, 0, 0], axis) - 0.02 * axis)


def test_actuation_joint_block(hexarm):
    G = M.actuation_matrix(hexarm)
    assert np.abs(G[6:9, 6:9] - np.eye(3)).max() == 0.0
    assert np.abs(G[0:6, 6:9]).max() == 0.0
    assert np.abs(G[6:9, 0:6]).max() == 0.0


# -- free dynamics ------------------------------------------------------------

def test_hover_equilibrium(hexbare):
    x = hexbare.pack_state(position=(0.3, -0.2, 1.5))
    u = M.gravity_compensation(hexbare, x)
    assert u[:6] == pytest.approx(np.full(6, 2.0 * 9.81 / 6))
    assert np.abs(M.fd_free(hexbare, x, u)).max() < 1e-9


def test_free_fall(hexbare):
    x = hexbare.pack_state(position=(0, 0, 2), rpy=(0.3, -0.2, 0.9))
    a = M.fd_free(hexbare, x, np.zeros(6))
    R = K.quat_to_rot(np.ascontiguousarray(x[3:7]))
    assert a[0:3] == pytest.approx(R.T @ np.array([0.0, 0.0, -9.81]))
    assert np.abs(a[3:6]).max() < 1e-12


def test_mass_matrix_probing(hexarm):
    # columns of H recovered by inverse dynamics on unit accelerations
    for _ in range(10):
        x = random_state(hexarm, rng)
        H = M.mass_matrix(hexarm, x)
        assert np.abs(H - H.T).max() < 1e-12
        assert np.linalg.eigvalsh(H).min() > 0.0
        C = M.nonlinear_terms(hexarm, x)
        for i in range(hexarm.nv):
            e = np.zeros(hexarm.nv)
            e[i] = 1.0
            assert np.abs(M.inverse_dynamics(hexarm, x, e) - C - H[:, i]).max() < 1e-9


def test_fd_free_solves_newton_euler(hexarm):
    for _ in range(5):
        x = random_state(hexarm, rng)
        u = rng.normal(0, 2, hexarm.nu)
        fe = rng.normal(0, 1, hexarm.nv)
        a = M.fd_free(hexarm, x, u, fe)
        res = (M.mass_matrix(hexarm, x) @ a + M.nonlinear_terms(hexarm, x)
               - hexarm.arrays.actuation @ u - fe)
        assert np.abs(res).max() < 1e-9


def test_gravity_load_matches_weight(hexarm):
    x = hexarm.pack_state(position=(0, 0, 1), joints=(0.3, -0.5, 0.2))
    g = M.nonlinear_terms(hexarm, x)
    # level pose: vertical force row carries the full weight
    assert g[2] == pytest.approx(hexarm.total_mass * 9.81)


# -- kinematics ----------------------------------------------------------------

def test_frame_velocity_matches_placement_derivative(hexarm):
    h = 1e-7
    for _ in range(8):
        x = random_state(hexarm, rng)
        fk = M.forward_kinematics(hexarm, x)
        xp = x.copy()
        xp[:hexarm.nq] = K.state_oplus(x, h * x[hexarm.nq:], hexarm.n_joints)[:hexarm.nq]
        xm = x.copy()
        xm[:hexarm.nq] = K.state_oplus(x, -h * x[hexarm.nq:], hexarm.n_joints)[:hexarm.nq]
        fkp = M.forward_kinematics(hexarm, xp)
        fkm = M.forward_kinematics(hexarm, xm)
        for name, (pose, tw) in fk.items():
            R = pose.rotation
            v_lin = R.T @ (fkp[name][0].trans - fkm[name][0].trans) / (2 * h)
            Wm = R.T @ (fkp[name][0].rotation - fkm[name][0].rotation) / (2 * h)
            v_ang = np.array([Wm[2, 1], Wm[0, 2], Wm[1, 0]])
            assert np.abs(v_lin - tw[0:3]).max() < 1e-6
            assert np.abs(v_ang - tw[3:6]).max() < 1e-5


def test_jacobian_times_velocity_is_twist(hexarm):
    for _ in range(6):
        x = random_state(hexarm, rng)
        fk = M.forward_kinematics(hexarm, x)
        for name in ("base", "ee"):
            J = M.frame_jacobian(hexarm, x, name)
            assert np.abs(J @ x[hexarm.nq:] - fk[name][1]).max() < 1e-10


def test_base_jacobian_is_identity(hexbare):
    x = random_state(hexbare, rng)
    assert np.abs(M.frame_jacobian(hexbare, x, "base") - np.eye(6)).max() < 1e-12


def test_base_frame_has_zero_joint_columns(hexarm):
    x = random_state(hexarm, rng)
    J = M.frame_jacobian(hexarm, x, "base")
    assert np.abs(J[:, 6:]).max() == 0.0
    assert np.abs(J[:, :6] - np.eye(6)).max() < 1e-12


# -- contact dynamics -----------------------------------------------------------

CON = [M.ContactSpec(frame="ee", anchor=(0.4, 0.0, 0.0), axes=("x", "y", "z"))]


def test_contact_matches_dense_kkt(hexarm):
    worst = 0.0
    for _ in range(20):
        x = random_state(hexarm, rng)
        u = rng.normal(0, 2, hexarm.nu)
        qdd, lam = M.fd_contact(hexarm, x, u, CON)
        t = M.contact_kkt_terms(hexarm, x, u, CON)
        nc = t["Jc"].shape[0]
        kkt = np.block([[t["H"], t["Jc"].T], [t["Jc"], np.zeros((nc, nc))]])
        sol = np.linalg.solve(kkt, np.concatenate([t["tau"], t["rhs"]]))
        # lam acts on the robot: H qdd - Jc^T lam = tau, so the multiplier is -lam
        worst = max(worst, np.abs(qdd - sol[:hexarm.nv]).max(),
                    np.abs(lam + sol[hexarm.nv:]).max(),
                    np.abs(t["H"] @ qdd - t["Jc"].T @ lam - t["tau"]).max(),
                    np.abs(t["Jc"] @ qdd - t["rhs"]).max())
    assert worst < 1e-8


def test_contact_matches_null_space_projection(hexarm):
    # independent route: particular solution plus null-space minimization
    for _ in range(10):
        x = random_state(hexarm, rng)
        u = rng.normal(0, 2, hexarm.nu)
        qdd, lam = M.fd_contact(hexarm, x, u, CON)
        t = M.contact_kkt_terms(hexarm, x, u, CON)
        qdd_p, *_ = np.linalg.lstsq(t["Jc"], t["rhs"], rcond=None)
        Z = null_space(t["Jc"])
        y = np.linalg.solve(Z.T @ t["H"] @ Z, Z.T @ (t["tau"] - t["H"] @ qdd_p))
        assert np.abs(qdd - (qdd_p + Z @ y)).max() < 1e-8
        lam_ls, *_ = np.linalg.lstsq(t["Jc"].T, t["H"] @ qdd - t["tau"], rcond=None)
        assert np.abs(lam - lam_ls).max() < 1e-8


def test_partial_axes_reduce_constraint(hexarm):
    con = [M.ContactSpec(frame="ee", anchor=(0.4, 0.0, 0.0), axes=("x", "z"))]
    x = random_state(hexarm, rng)
    u = rng.normal(0, 2, hexarm.nu)
    qdd, lam = M.fd_contact(hexarm, x, u, con)
    assert lam.shape == (2,)
    t = M.contact_kkt_terms(hexarm, x, u, con)
    assert t["Jc"].shape == (2, hexarm.nv)
    assert np.abs(t["Jc"] @ qdd - t["rhs"]).max() < 1e-10


def test_no_contacts_reduces_to_free_dynamics(hexarm):
    x = random_state(hexarm, rng)
    u = rng.normal(0, 2, hexarm.nu)
    a_free = M.fd_free(hexarm, x, u)
    a_step = M.step(hexarm, x, u, 0.01, "rk4", contacts=())
    a_direct = M.step(hexarm, x, u, 0.01, "rk4")
    assert np.abs(a_step - a_direct).max() == 0.0
    qdd, lam = M.fd_contact(hexarm, x, u, ())
    assert lam.shape == (0,)
    assert np.abs(qdd - a_free).max() < 1e-12


def test_pin_at_com_carries_full_weight(hexbare):
    # bare hexacopter pinned at its mass center: static, reaction equals weight
    x = hexbare.pack_state(position=(0.0, 0.0, 1.0))
    con = [M.ContactSpec(frame="ee", anchor=(0.0, 0.0, 1.0), axes=("x", "y", "z"))]
    qdd, lam = M.fd_contact(hexbare, x, np.zeros(6), con)
    assert np.abs(qdd).max() < 1e-10
    assert lam == pytest.approx([0.0, 0.0, hexbare.total_mass * 9.81])


def test_surface_frame_rotates_reaction(hexbare):
    # same pin, surface frame yawed 90 degrees: values permute, physics identical
    x = hexbare.pack_state(position=(0.0, 0.0, 1.0), velocity=np.zeros(6))
    con = [M.ContactSpec(frame="ee", anchor=(0.0, 0.0, 1.0), axes=("x", "y", "z"),
                         surface_rpy=(np.pi / 2, 0.0, 0.0))]
    qdd, lam = M.fd_contact(hexbare, x, np.zeros(6), con)
    assert np.abs(qdd).max() < 1e-10
    # world +z maps to surface +y after a roll of +90 degrees
    assert lam == pytest.approx([0.0, hexbare.total_mass * 9.81, 0.0], abs=1e-9)


def test_analytic_bias_matches_differenced_jacobian(hexarm):
    # velocity-product term agrees with d(Jc)/dt qd taken by differencing
    con = hexarm.contact_arrays(CON)
    for _ in range(10):
        x = random_state(hexarm, rng)
        bias = K.contact_bias(hexarm.arrays, x, con)
        drift = K.contact_drift(hexarm.arrays, x, con)
        assert np.abs(bias - drift).max() < 1e-5


def test_rank_deficient_contact_raises(hexarm):
    con = [M.ContactSpec(frame="ee", anchor=(0.4, 0.0, 0.0), axes=("x", "y", "z")),
           M.ContactSpec(frame="ee", anchor=(0.4, 0.0, 0.0), axes=("x", "y", "z"))]
    x = random_state(hexarm, rng)
    with pytest.raises(ContactRankError):
        M.fd_contact(hexarm, x, np.zeros(hexarm.nu), con)


def test_contact_drift_stays_small(hexarm):
    x = hexarm.pack_state(position=(0, 0, 1.0), joints=(0.4, -0.6, 0.1))
    anchor = M.forward_kinematics(hexarm, x)["ee"][0].trans
    u = M.gravity_compensation(hexarm, x) * 0.95
    con = hexarm.contact_arrays([M.ContactSpec(
        frame="ee", anchor=tuple(anchor), axes=("x", "y", "z"), baumgarte=(50.0, 625.0))])
    xx = x.copy()
    worst = 0.0
    for _ in range(200):  # one second at 5 ms
        xx = M.step(hexarm, xx, u, 0.005, "rk4", con)
        p = M.forward_kinematics(hexarm, xx)["ee"][0].trans
        worst = max(worst, np.linalg.norm(p - anchor))
    assert worst < 1e-4


def test_baumgarte_pulls_back_offset_start(hexarm):
    x = hexarm.pack_state(position=(0, 0, 1.0), joints=(0.4, -0.6, 0.1))
    anchor = M.forward_kinematics(hexarm, x)["ee"][0].trans + np.array([0.004, 0, 0])
    u = M.gravity_compensation(hexarm, x)
    con = hexarm.contact_arrays([M.ContactSpec(
        frame="ee", anchor=tuple(anchor), axes=("x", "y", "z"), baumgarte=(50.0, 625.0))])
    xx = x.copy()
    for _ in range(400):
        xx = M.step(hexarm, xx, u, 0.005, "rk4", con)
    p = M.forward_kinematics(hexarm, xx)["ee"][0].trans
    assert np.linalg.norm(p - anchor) < 5e-4


# -- integration and derivatives ------------------------------------------------

def test_rk4_against_fine_euler(hexarm):
    x = random_state(hexarm, rng)
    u = M.gravity_compensation(hexarm, x)
    x_rk = M.step(hexarm, x, u, 0.02, "rk4")
    xf = x.copy()
    for _ in range(2000):
        xf = M.step(hexarm, xf, u, 0.02 / 2000, "semi_implicit_euler")
    assert np.abs(K.state_ominus(x_rk, xf, hexarm.n_joints)).max() < 1e-4


def test_semi_implicit_euler_structure(hexarm):
    # velocity updates first, configuration moves with the new velocity
    x = random_state(hexarm, rng)
    u = rng.normal(0, 2, hexarm.nu)
    dt = 0.01
    a = M.fd_free(hexarm, x, u)
    v_new = x[hexarm.nq:] + dt * a
    dq = np.concatenate([dt * v_new, dt * a])
    expected = K.state_oplus(x, dq, hexarm.n_joints)
    expected[hexarm.nq:] = v_new
    got = M.step(hexarm, x, u, dt, "semi_implicit_euler")
    assert np.abs(got[:hexarm.nq] - expected[:hexarm.nq]).max() < 1e-12
    assert np.abs(got[hexarm.nq:] - v_new).max() < 1e-12


def test_step_derivatives_match_directional_differences(hexarm):
    for contacts in ((), CON):
        con = hexarm.contact_arrays(contacts)
        x = random_state(hexarm, rng)
        u = rng.normal(0, 2, hexarm.nu)
        fx, fu = M.step_derivatives(hexarm, x, u, 0.03, "rk4", con)
        assert fx.shape == (hexarm.ndx, hexarm.ndx)
        assert fu.shape == (hexarm.ndx, hexarm.nu)
        h = 1e-6
        for _ in range(3):
            d = rng.normal(0, 1, hexarm.ndx)
            d /= np.linalg.norm(d)
            sp = M.step(hexarm, K.state_oplus(x, h * d, hexarm.n_joints), u, 0.03, "rk4", con)
            sm = M.step(hexarm, K.state_oplus(x, -h * d, hexarm.n_joints), u, 0.03, "rk4", con)
            num = K.state_ominus(sp, sm, hexarm.n_joints) / (2 * h)
            assert np.abs(fx @ d - num).max() < 1e-5
        for _ in range(3):
            du = rng.normal(0, 1, hexarm.nu)
            du /= np.linalg.norm(du)
            sp = M.step(hexarm, x, u + h * du, 0.03, "rk4", con)
            sm = M.step(hexarm, x, u - h * du, 0.03, "rk4", con)
            num = K.state_ominus(sp, sm, hexarm.n_joints) / (2 * h)
            assert np.abs(fu @ du - num).max() < 1e-5


def test_sweep_matches_single_node_derivatives(hexarm):
    X = np.stack([random_state(hexarm, rng) for _ in range(4)])
    U = rng.normal(0, 2, (3, hexarm.nu))
    con = hexarm.contact_arrays(())
    FX, FU = K.sweep_derivatives(hexarm.arrays, X, U, 0.03, K.INTEG_RK4, con, 1e-6)
    for k in range(3):
        fx, fu = M.step_derivatives(hexarm, X[k], U[k], 0.03, "rk4")
        assert np.abs(FX[k] - fx).max() < 1e-12
        assert np.abs(FU[k] - fu).max() < 1e-12


# -- payload variants ------------------------------------------------------------

def test_payload_variant_masses(hexarm):
    v = hexarm.with_payload(0.4, com=(0.0, 0.0, -0.08))
    assert v.total_mass == pytest.approx(hexarm.total_mass + 0.4)
    assert v.n_joints == hexarm.n_joints
    x = v.pack_state(position=(0, 0, 1))
    assert M.nonlinear_terms(v, x)[2] == pytest.approx(v.total_mass * 9.81)


def test_payload_parallel_axis():
    # two point masses on a massless-ish link reproduce the two-body inertia
    doc = hexa_doc(arm=True)
    m = M.load_model(doc)
    v = m.with_payload(0.3, com=(0.0, 0.0, -0.10))
    last = v.joints[-1]
    m0 = m.joints[-1]
    c_new = (m0.mass * m0.com + 0.3 * np.array([0, 0, -0.10])) / (m0.mass + 0.3)
    assert last.com == pytest.approx(c_new)
    d0 = m0.com - c_new
    dp = np.array([0, 0, -0.10]) - c_new
    S0 = K._skew(np.ascontiguousarray(d0))
    Sp = K._skew(np.ascontiguousarray(dp))
    expected = m0.inertia - m0.mass * (S0 @ S0) - 0.3 * (Sp @ Sp)
    assert last.inertia == pytest.approx(expected)


def test_payload_requires_arm(hexbare):
    with pytest.raises(ModelConfigError):
        hexbare.with_payload(0.2)


def test_payload_drop_changes_hover_thrust(hexarm):
    v = hexarm.with_payload(0.5)
    x = hexarm.pack_state(position=(0, 0, 1))
    u_heavy = M.gravity_compensation(v, x)
    u_light = M.gravity_compensation(hexarm, x)
    assert u_heavy[:6].sum() == pytest.approx(v.total_mass * 9.81, rel=1e-6)
    assert u_heavy[:6].sum() - u_light[:6].sum() == pytest.approx(0.5 * 9.81, rel=1e-6)
