"""Acceptance suite: one check per criterion, each with its runtime budget.

Every test prints a single ``PASS``/``FAIL`` line before asserting, so the
summary survives output capture.
"""
import time

import numpy as np
import pytest

from idclf import cli
from idclf.clf import care_residual, clf_derivative_terms, clf_value, default_Q, make_clf, solve_care
from idclf.constraints import holonomic_set, impact_map
from idclf.control import ControllerConfig, ProsthesisController, feedback_linearize
from idclf.model import (MeasurableBundle, dynamics_terms, energies, model_from_dict,
                         subsystem_terms)
from idclf.qpsolve import QPProblem, kkt_residuals, solve_qp
from idclf.sim import stride_distances

from helpers import random_constrained_state, subsystem_stance_state
from oracles import enumerate_qp, random_qp, two_link_lagrangian
from test_constraints import _subsystem_accel
from test_model import M2, L2, C2, I2, G, chain_cfg, _energy_drift

F_F = np.array([25.0, -560.0, 12.0])


def report(capsys, n, ok, elapsed, budget, detail):
    ok = bool(ok) and elapsed < budget
    with capsys.disabled():
        print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {detail}  "
              f"({elapsed:.1f} s, budget {budget:g} s)")
    return ok


class Clock:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


# -- 1: dynamics -------------------------------------------------------------------

def test_c01_dynamics(capsys, model, rng):
    with Clock() as c:
        double = model_from_dict(chain_cfg(M2, L2, C2, I2))
        D_f, H_f, _ = two_link_lagrangian(M2, L2, C2, I2, G)
        err = 0.0
        for _ in range(200):
            q, qd = rng.uniform(-np.pi, np.pi, 2), rng.normal(scale=3.0, size=2)
            D, H = dynamics_terms(double, q, qd)
            err = max(err, np.max(np.abs(D - np.array(D_f(*q, *qd), float))),
                      np.max(np.abs(H - np.array(H_f(*q, *qd), float).ravel())))
        drift2, _ = _energy_drift(double, np.array([1.2, -0.7]), np.array([0.5, 2.0]))
        q = rng.uniform(-0.5, 0.5, model.eta)
        q[1] = 2.0
        drift8, _ = _energy_drift(model, q, rng.normal(scale=0.5, size=model.eta))
    ok = err <= 1e-10 and drift2 < 1e-6 and drift8 < 1e-6
    ok = report(capsys, 1, ok, c.elapsed, 10,
                f"oracle err {err:.1e}, energy drift {drift2:.1e} / {drift8:.1e}")
    assert ok


# -- 2: equivalent subsystem --------------------------------------------------------

def test_c02_equivalent_subsystem(capsys, model, sub, rng):
    qs = model.coord_indices(["pk", "pa"])
    worst = 0.0
    with Clock() as c:
        for k in range(100):
            dom = "ps" if k % 2 == 0 else "pns"
            s, hs = random_constrained_state(model, rng, dom)
            u = rng.normal(scale=30, size=6)
            qdd, acc, *_ = _subsystem_accel(model, sub, s, u, hs, dom)
            worst = max(worst, np.max(np.abs(acc[3:] - qdd[qs])))
    ok = report(capsys, 2, worst <= 1e-8, c.elapsed, 5, f"max |q_s accel diff| {worst:.1e}")
    assert ok


# -- 3: CARE and RES-CLF ---------------------------------------------------------

def test_c03_clf(capsys, rng):
    with Clock() as c:
        P1 = solve_care(1, np.eye(2))
        r3 = np.sqrt(3.0)
        hand = np.max(np.abs(P1 - [[r3, 1.0], [1.0, r3]]))
        res = np.max(np.abs(care_residual(P1, np.eye(2), 1)))
        P2 = solve_care(2, default_Q(2))
        res = max(res, np.max(np.abs(care_residual(P2, default_Q(2), 2))))
        bad = 0
        for eps in (0.1, 0.25):
            clf = make_clf(2, default_Q(2), eps)
            Kp, Kd = clf.gains()
            for _ in range(1000):
                xi = rng.normal(size=4) * rng.uniform(0.01, 10)
                V, n2 = clf_value(clf, xi), xi @ xi
                LFV, LGV = clf_derivative_terms(clf, xi)
                rate = LFV + LGV @ (-Kp @ xi[:2] - Kd @ xi[2:])
                bad += not (clf.c1 * n2 <= V * (1 + 1e-12) <= clf.c2 / eps ** 2 * n2 * (1 + 1e-12)
                            and rate <= -clf.gamma / eps * V + 1e-9 * V)
    ok = hand <= 1e-12 and res <= 1e-8 and bad == 0
    ok = report(capsys, 3, ok, c.elapsed, 5,
                f"CARE residual {res:.1e}, hand P err {hand:.1e}, sandwich failures {bad}/2000")
    assert ok


# -- 4: QP solver -----------------------------------------------------------------

def test_c04_qp_solver(capsys, rng):
    xerr = kkt = 0.0
    with Clock() as c:
        for _ in range(500):
            n = int(rng.integers(2, 7))
            H, g, Ae, be, Ai, bi = random_qp(rng, n, int(rng.integers(0, min(3, n))),
                                             int(rng.integers(0, 6)))
            p = QPProblem(H, g, Ae, be, Ai, bi)
            r = solve_qp(p)
            xerr = max(xerr, np.max(np.abs(r.x - enumerate_qp(H, g, p.A_eq, p.b_eq, p.A_in,
                                                              p.b_in))))
            kkt = max(kkt, max(kkt_residuals(p, r.x, r.lam_eq, r.mu_in).values()))
    ok = report(capsys, 4, xerr <= 1e-8 and kkt <= 1e-6, c.elapsed, 30,
                f"max |x - oracle| {xerr:.1e}, max KKT {kkt:.1e}")
    assert ok


# -- 5: QP equals feedback linearization at zero error ------------------------------

def test_c05_qp_matches_feedback_linearization(capsys, sub, gait):
    with Clock() as c:
        ctrl = ProsthesisController(sub, gait, ControllerConfig(variant="IDCLFQP_Ff"))
        qb, qbd = subsystem_stance_state(sub, ctrl)
        t = subsystem_terms(sub, qb, qbd)
        force = t.Jf.T @ F_F
        Jh, Jdq, _ = ctrl.hsets["ps"].rows(sub, qb, qbd)
        ob = ctrl.maps["ps"].evaluate(qb, qbd, 0.2)
        u_fl = feedback_linearize(t.D, t.H, t.B, Jh, Jdq, ob, np.zeros(2), force)
        b = MeasurableBundle(qb[:3], qbd[:3], qb[3:], qbd[3:], F_F, clock=0.2)
        for _ in range(200):
            out = ctrl.tick(b)
        err = np.max(np.abs(out.u_s - u_fl))
    ok = report(capsys, 5, err <= 1e-4 and np.max(np.abs(ob.xi)) <= 1e-10, c.elapsed, 60,
                f"|u_QP - u_FL| {err:.1e} at |xi| {np.max(np.abs(ob.xi)):.1e}")
    assert ok


# -- 6, 7, 8: paired comparison walks ---------------------------------------------

@pytest.fixture(scope="module")
def comparison():
    scn = cli.load_scenario()
    start = cli.initial_state(scn.model, scn.gait, None, scn.sim)
    runs = {}
    for v in cli.COMPARISON:
        t0 = time.perf_counter()
        log = cli.run_variant(scn, v, start)
        runs[v] = (log, time.perf_counter() - t0)
    return scn, runs


def test_c06_tracking_comparison(capsys, comparison):
    scn, runs = comparison
    mets = {v: cli.metrics_from_log(log, v, log.status, log.message, log.steps)
            for v, (log, _) in runs.items()}
    elapsed = sum(t for _, t in runs.values())
    ff, fest, plain = (mets[v] for v in cli.COMPARISON)
    rf, re, rp = (m.tracking_rms["pk"] for m in (ff, fest, plain))
    walked = all(m.status == "ok" and m.steps >= scn.sim.n_steps for m in (ff, fest))
    ok = walked and abs(re - rf) <= 0.05 * rf and rp >= 5 * re
    ok = report(capsys, 6, ok, elapsed, 120,
                f"knee RMS Ff {rf:.2e} ({ff.status}, {ff.steps} steps), Fest {re:.2e} "
                f"({fest.status}, {fest.steps} steps), plain {rp:.2e} ({plain.status}); "
                f"Fest/Ff {re / rf:.2f}, plain/Fest {rp / re:.2f}")
    assert ok


def test_c07_force_estimate(capsys, comparison):
    scn, runs = comparison
    log, elapsed = runs["IDCLFQP_Fest"]
    stance = log.col("domain") == cli.STANCE
    err = cli.force_error_pct(log, stance)
    worst = np.inf if err is None else float(np.max(err))
    ok = (scn.controller.N_avg == 1 and scn.sim.control_rate == 1000.0 and log.status == "ok"
          and worst <= 2.0)
    ok = report(capsys, 7, ok, elapsed, 60,
                f"summed-force RMS error {worst:.1f}% of signal over {int(stance.sum())} "
                f"stance ticks ({log.status} after {log.steps} steps)")
    assert ok


def test_c08_clf_bound(capsys, comparison):
    _, runs = comparison
    lines, ok = [], True
    with Clock() as c:
        for v in ("IDCLFQP_Ff", "IDCLFQP_Fest", "IDCLFQP"):
            log = runs[v][0]
            r = cli.clf_report(log, tol=1e-8, fd_tol=1e-3)
            ok &= r.optimizer_violations == 0 and r.t.size > 0
            ok &= not (r.fd_max_error > 1e-3)
            lines.append(f"{v}: {r.optimizer_violations} optimizer violations "
                         f"(max excess {r.optimizer_max_excess:.1e}), FD err {r.fd_max_error:.1e}, "
                         f"numeric-above-bound fraction {r.numeric_violation_fraction:.3f}")
    ok = report(capsys, 8, ok, c.elapsed, 60, "; ".join(lines))
    assert ok


# -- 9: endurance at 200 Hz ----------------------------------------------------------

def test_c09_endurance(capsys):
    scn = cli.load_scenario(cli._data_path("scenario_endurance.json"))
    with Clock() as c:
        start = cli.initial_state(scn.model, scn.gait, None, scn.sim)
        log = cli.run_variant(scn, "IDCLFQP_Fest", start)
    d = stride_distances(log)
    # stance starts are two steps apart, so d[4] compares the starts at steps 8 and 10
    tail = d[4:]
    converged = tail.size > 0 and bool(np.all(tail < 1e-3))
    ok = (scn.sim.control_rate == 200.0 and log.status == "ok" and log.steps >= 20
          and converged)
    last = f"{d[-1]:.1e}" if d.size else "n/a"
    ok = report(capsys, 9, ok, c.elapsed, 180,
                f"{log.status} after {log.steps} steps at {scn.sim.control_rate:g} Hz, "
                f"last stride distance {last}")
    assert ok


# -- 10: impact map --------------------------------------------------------------------

def test_c10_impact_map(capsys, model, rng):
    worst_j = worst_ke = worst_idem = 0.0
    with Clock() as c:
        for k in range(1000):
            dom, other = ("pns", "ps") if k % 2 else ("ps", "pns")
            s, _ = random_constrained_state(model, rng, other, speed=1.5)
            hs = holonomic_set(model, model.domains[dom]["constraints"]).with_reference(model, s.q)
            post, _ = impact_map(model, s, hs)
            worst_j = max(worst_j, np.max(np.abs(hs.jacobian(model, s.q) @ post.qdot)))
            worst_ke = max(worst_ke, energies(model, post.q, post.qdot)[0]
                           - energies(model, s.q, s.qdot)[0])
            again, _ = impact_map(model, post, hs)
            worst_idem = max(worst_idem, np.max(np.abs(again.qdot - post.qdot)))
    ok = worst_j <= 1e-10 and worst_ke <= 1e-12 and worst_idem <= 1e-12
    ok = report(capsys, 10, ok, c.elapsed, 5,
                f"|J qdot+| {worst_j:.1e}, max KE gain {worst_ke:.1e}, "
                f"idempotence {worst_idem:.1e}")
    assert ok
