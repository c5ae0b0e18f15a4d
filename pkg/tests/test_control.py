import dataclasses
import json
from importlib import resources

import numpy as np
import pytest

from idclf.constraints import holonomic_set
from idclf.control import (ControllerConfig, ProsthesisController, affine_dynamics, build_idclfqp,
                           controller_config_from_dict, controller_config_to_dict,
                           feedback_linearize, load_controller_config, pd_joint_controller,
                           pd_output)
from idclf.errors import ConfigError, OutputRankError
from idclf.model import FullState, MeasurableBundle, subsystem_terms
from idclf.qpsolve import solve_qp
from idclf import _kernels as K

from helpers import subsystem_stance_state

F_F = np.array([25.0, -560.0, 12.0])


@pytest.fixture(scope="module")
def pc(sub, gait):
    return ProsthesisController(sub, gait, ControllerConfig(variant="IDCLFQP_Ff"))


def stance_terms(sub, pc, qb, qbd):
    t = subsystem_terms(sub, qb, qbd)
    Jh, Jdq, _ = pc.hsets["ps"].rows(sub, qb, qbd)
    return t, Jh, Jdq


def random_stance(sub, pc, rng, clock=0.2):
    qb, qbd = subsystem_stance_state(sub, pc, clock)
    qs = qb[3:] + rng.normal(scale=0.05, size=2)
    qsd = rng.normal(scale=0.5, size=2)
    from idclf.sim import stance_base_ik
    from idclf.model import SitePoint
    base, bd = stance_base_ik(sub, qs, qsd, (0.0, 0.06825, 0.0), SitePoint("p_foot"))
    return np.r_[base, qs], np.r_[bd, qsd]


# -- configuration ----------------------------------------------------------------

def test_config_round_trip_and_bundled_default():
    cfg = load_controller_config(resources.files("idclf.data") / "controller_default.json")
    assert cfg == ControllerConfig()
    assert controller_config_from_dict(controller_config_to_dict(cfg)) == cfg


@pytest.mark.parametrize("kw", [{"variant": "LQR"}, {"eps": 1.0}, {"eps": 0.0}, {"sigma": 0.0},
                                {"rho": -1.0}, {"kp": 0.0}, {"u_max": (0.0, 1.0)},
                                {"N_avg": 0}, {"noise_std": -1.0}])
def test_config_invariants(kw):
    with pytest.raises(ConfigError):
        ControllerConfig(**kw)


def test_config_dict_errors():
    with pytest.raises(ConfigError):
        controller_config_from_dict({"schema_version": 2})
    with pytest.raises(ConfigError):
        controller_config_from_dict({"schema_version": 1, "gain": 3})


def test_u_max_length_checked(sub, gait):
    with pytest.raises(ConfigError):
        ProsthesisController(sub, gait, ControllerConfig(u_max=(1.0, 2.0, 3.0)))


# -- PD -----------------------------------------------------------------------------

def test_pd_joint_controller():
    kp, kd, um = np.array([300.0, 400.0]), np.array([15.0, 20.0]), np.array([120.0, 175.0])
    z = np.zeros(2)
    np.testing.assert_array_equal(pd_joint_controller(z + 0.3, z, z + 0.3, z, kp, kd, um), 0.0)
    e = np.array([0.01, -0.02])
    np.testing.assert_allclose(pd_joint_controller(e, z, z, z, kp, z, um), -kp * e)
    np.testing.assert_allclose(np.abs(pd_joint_controller(z + 5, z, z, z, kp, kd, um)), um)


def test_pd_variant_uses_joint_pd(sub, gait, rng):
    pcd = ProsthesisController(sub, gait, ControllerConfig(variant="PD"))
    qb, qbd = random_stance(sub, pcd, rng)
    out = pcd.tick(MeasurableBundle(qb[:3], qbd[:3], qb[3:], qbd[3:], clock=0.2))
    ob = pcd.maps["ps"].evaluate(qb, qbd, 0.2)
    ref = pd_joint_controller(qb[3:], qbd[3:], qb[3:] - ob.y, qbd[3:] - ob.ydot,
                              np.array(pcd.cfg.pd_kp), np.array(pcd.cfg.pd_kd), pcd.u_max)
    np.testing.assert_allclose(out.u_s, ref)


# -- feedback linearization ------------------------------------------------------------

def test_feedback_linearization_substitution(sub, pc, rng):
    for _ in range(20):
        qb, qbd = random_stance(sub, pc, rng)
        t, Jh, Jdq = stance_terms(sub, pc, qb, qbd)
        ob = pc.maps["ps"].evaluate(qb, qbd, 0.2)
        nu = rng.normal(scale=5, size=2)
        f_ext = t.Jf.T @ F_F
        u = feedback_linearize(t.D, t.H, t.B, Jh, Jdq, ob, nu, f_ext)
        a0, A1, _, _ = affine_dynamics(t.D, t.H, t.B, Jh, Jdq, f_ext)
        qdd = a0 + A1 @ u
        np.testing.assert_allclose(ob.J_y @ qdd + ob.drift, nu, atol=1e-6)
        np.testing.assert_allclose(Jh @ qdd + Jdq, 0.0, atol=1e-9)


def test_feedback_linearization_micro_step(sub, pc, rng):
    """Numeric output acceleration over a short simulated step equals nu."""
    qb, qbd = random_stance(sub, pc, rng)
    t, Jh, Jdq = stance_terms(sub, pc, qb, qbd)
    mp = pc.maps["ps"]
    c = 0.2
    ob = mp.evaluate(qb, qbd, c)
    nu = np.array([3.0, -7.0])
    f = t.B @ feedback_linearize(t.D, t.H, t.B, Jh, Jdq, ob, nu, t.Jf.T @ F_F) + t.Jf.T @ F_F
    hs = pc.hsets["ps"].with_reference(sub, qb)
    args = (*sub._dyn_args(), *hs.kernel_args(), hs.reference, 0.0, 0.0)
    h = 1e-5
    qp, vp = K.rk4(*args, qb, qbd, f, h)
    qm, vm = K.rk4(*args, qb, qbd, f, -h)
    ydd = (mp.evaluate(qp, vp, c + h).y - 2 * ob.y + mp.evaluate(qm, vm, c - h).y) / h ** 2
    np.testing.assert_allclose(ydd, nu, atol=1e-4)


def test_singular_decoupling_rejected(sub, pc, rng):
    qb, qbd = random_stance(sub, pc, rng)
    t, Jh, Jdq = stance_terms(sub, pc, qb, qbd)
    ob = pc.maps["ps"].evaluate(qb, qbd, 0.2)
    bad = dataclasses.replace(ob, J_y=np.vstack([ob.J_y[0], ob.J_y[0]]))
    with pytest.raises(OutputRankError):
        feedback_linearize(t.D, t.H, t.B, Jh, Jdq, bad, np.zeros(2))


def test_pd_output_decreases_clf(sub, pc, rng):
    for _ in range(50):
        qb, qbd = random_stance(sub, pc, rng)
        ob = pc.maps["ps"].evaluate(qb, qbd, 0.2)
        from idclf.clf import clf_derivative_terms, clf_value
        LFV, LGV = clf_derivative_terms(pc.clf, ob.xi)
        assert LFV + LGV @ pd_output(ob, pc.Kp, pc.Kd) < 0
        assert LFV + LGV @ pd_output(ob, pc.Kp, pc.Kd) <= (
            -pc.clf.gamma / pc.clf.eps * clf_value(pc.clf, ob.xi) * (1 - 1e-9))


# -- ID-CLF-QP ---------------------------------------------------------------------

def _qp(pc, sub, qb, qbd, force, prev=None, u_max=None, clock=0.2):
    t, Jh, Jdq = stance_terms(sub, pc, qb, qbd)
    ob = pc.maps["ps"].evaluate(qb, qbd, clock)
    nu = pd_output(ob, pc.Kp, pc.Kd)
    p = build_idclfqp(t.D, t.H, t.B, Jh, Jdq, ob, pc.clf, force, pc.cfg, nu,
                      pc.u_max if u_max is None else u_max, prev)
    return p, t, Jh, Jdq, ob


def test_qp_layout(sub, pc, rng):
    qb, qbd = random_stance(sub, pc, rng)
    p, *_ = _qp(pc, sub, qb, qbd, np.zeros(5))
    assert p.n == 5 + 2 + 3 + 1
    assert p.A_eq.shape == (5, 11)          # dynamics only, holonomic rows are soft
    assert p.A_in.shape == (2 * 2 + 2, 11)  # CLF row, torque box, delta >= 0
    assert p.layout["delta"] == 10
    assert np.linalg.eigvalsh(p.hess).min() > 0


def test_qp_matches_feedback_linearization_at_zero_error(sub, pc):
    qb, qbd = subsystem_stance_state(sub, pc)
    force = subsystem_terms(sub, qb, qbd).Jf.T @ F_F
    p, t, Jh, Jdq, ob = _qp(pc, sub, qb, qbd, force)
    assert np.max(np.abs(ob.xi)) <= 1e-10
    u_fl = feedback_linearize(t.D, t.H, t.B, Jh, Jdq, ob, np.zeros(2), force)
    prev = None
    for _ in range(200):
        p, *_ = _qp(pc, sub, qb, qbd, force, prev)
        v = solve_qp(p).x
        if prev is not None and np.max(np.abs(v - prev)) < 1e-12:
            break
        prev = v
    assert np.max(np.abs(v[p.layout["u"]] - u_fl)) <= 1e-4
    # the same answer through the controller interface, ticking in place
    ctrl = ProsthesisController(sub, pc.gait, ControllerConfig(variant="IDCLFQP_Ff"))
    b = MeasurableBundle(qb[:3], qbd[:3], qb[3:], qbd[3:], F_F, clock=0.2)
    for _ in range(200):
        out = ctrl.tick(b)
    assert np.max(np.abs(out.u_s - u_fl)) <= 1e-4


def test_clf_row_holds_at_optimizer(sub, pc, rng):
    for _ in range(50):
        qb, qbd = random_stance(sub, pc, rng)
        force = subsystem_terms(sub, qb, qbd).Jf.T @ F_F
        p, t, Jh, Jdq, ob = _qp(pc, sub, qb, qbd, force)
        v = solve_qp(p).x
        row = p.A_in[0] @ v - p.b_in[0]
        assert row <= 1e-8
        assert v[p.layout["delta"]] >= -1e-12
        assert np.max(np.abs(v[p.layout["u"]])) <= np.max(pc.u_max) + 1e-9


def test_tiny_torque_limit_stays_feasible(sub, pc, rng):
    """With a starved torque box the QP stays feasible and saturates u.

    The wrench is a free decision variable and the contact rows are soft, so
    at the default relaxation weight the shortfall lands in the contact cost;
    once the relaxation is cheap it is taken by delta instead.
    """
    um = np.array([0.5, 0.5])
    cheap = ProsthesisController(sub, pc.gait, ControllerConfig(variant="IDCLFQP_Ff", rho=1.0))
    relaxed = 0
    for _ in range(10):
        qb, qbd = random_stance(sub, pc, rng)
        force = subsystem_terms(sub, qb, qbd).Jf.T @ F_F
        p, t, Jh, Jdq, ob = _qp(pc, sub, qb, qbd, force, u_max=um)
        v = solve_qp(p).x
        u = v[p.layout["u"]]
        assert np.max(np.abs(u)) <= 0.5 + 1e-9 and np.isclose(np.abs(u), 0.5).any()
        assert p.A_in[0] @ v - p.b_in[0] <= 1e-8
        p2, *_ = _qp(cheap, sub, qb, qbd, force, u_max=um)
        v2 = solve_qp(p2).x
        assert np.max(np.abs(v2[p2.layout["u"]])) <= 0.5 + 1e-9
        relaxed += v2[p2.layout["delta"]] > 0
    assert relaxed > 0


def test_force_term_changes_torque(sub, pc, rng):
    qb, qbd = random_stance(sub, pc, rng)
    force = subsystem_terms(sub, qb, qbd).Jf.T @ F_F
    u1 = solve_qp(_qp(pc, sub, qb, qbd, force)[0]).x[5:7]
    u0 = solve_qp(_qp(pc, sub, qb, qbd, np.zeros(5))[0]).x[5:7]
    assert np.linalg.norm(u1 - u0) > 0.1


def test_output_count_mismatch(sub, pc, rng):
    qb, qbd = random_stance(sub, pc, rng)
    t, Jh, Jdq = stance_terms(sub, pc, qb, qbd)
    ob = pc.maps["ps"].evaluate(qb, qbd, 0.2)
    bad = dataclasses.replace(ob, J_y=ob.J_y[:1])
    with pytest.raises(ConfigError):
        build_idclfqp(t.D, t.H, t.B, Jh, Jdq, bad, pc.clf, np.zeros(5), pc.cfg, np.zeros(1),
                      pc.u_max)


# -- controller interface ----------------------------------------------------------

def test_controller_rejects_full_state(sub, gait, model):
    ctrl = ProsthesisController(sub, gait)
    with pytest.raises(TypeError):
        ctrl.tick(FullState(np.zeros(model.eta), np.zeros(model.eta)))
    with pytest.raises(TypeError):
        ctrl.tick(np.zeros(13))


def test_measurable_bundle_has_no_human_states(model, sub):
    fields = {f.name for f in dataclasses.fields(MeasurableBundle)}
    assert fields == {"base_pose", "base_vel", "qs", "qs_dot", "zeta", "anchor_x", "clock", "t",
                      "domain"}
    human = set(model.partition["q_l"]) - {"base_x", "base_z", "base_pitch"}
    assert human.isdisjoint(sub.coord_names)


def test_estimator_variant_updates_state(sub, gait, rng):
    ctrl = ProsthesisController(sub, gait, ControllerConfig(variant="IDCLFQP_Fest"))
    qb, qbd = random_stance(sub, ctrl, rng)
    for k in range(3):
        out = ctrl.tick(MeasurableBundle(qb[:3], qbd[:3], qb[3:], qbd[3:], clock=0.2 + 1e-3 * k,
                                         t=1e-3 * k))
    assert len(ctrl.estimator.ring) == 1
    assert ctrl.estimator.prev.t == pytest.approx(2e-3)
    assert out.force_term.shape == (5,)
    ctrl.reset("pns")
    assert not ctrl.estimator.ring and ctrl.estimator.prev is None


def test_swing_uses_feedback_linearization(sub, gait):
    ctrl = ProsthesisController(sub, gait, ControllerConfig(variant="IDCLFQP"))
    b = MeasurableBundle(np.r_[0.0, 0.85, 0.1], np.zeros(3), np.array([0.4, 0.0]), np.zeros(2),
                         F_F, anchor_x=-0.1, clock=0.1, domain="pns")
    out = ctrl.tick(b)
    assert out.Upsilon is None and out.force_term is not None
