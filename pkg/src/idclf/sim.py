"""Hybrid walking simulation: two contact domains joined by plastic impacts."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from . import _kernels as K
from .clf import clf_derivative_terms, make_clf
from .constraints import holonomic_set, impact_map
from .control import ControllerConfig, FullOrderOutputs, ProsthesisController
from .errors import ConfigError, IdclfError, SimulationError, SolverError
from .model import (FullState, MeasurableBundle, SitePoint, com_positions, fixed_frame_link,
                    measurable_transform, place_on_contact, point_pose, subsystem_model,
                    subsystem_terms)

log = logging.getLogger(__name__)
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-4
    control_rate: float = 1000.0
    n_steps: int = 10
    warmup_steps: int = 0
    fall_fraction: float = 0.6
    stall_factor: float = 3.0
    drift_tol: float = 1e-6
    baumgarte: tuple | None = None
    seed: int = 0
    start_domain: str = "ps"

    def __post_init__(self):
        if not self.dt > 0 or not self.control_rate > 0:
            raise ConfigError("dt and control_rate must be positive")
        ratio = 1.0 / (self.control_rate * self.dt)
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigError("control period must be a whole number of integrator steps")
        if self.n_steps < 0 or self.warmup_steps < 0:
            raise ConfigError("step counts must be non-negative")

    @property
    def substeps(self):
        return int(round(1.0 / (self.control_rate * self.dt)))


@dataclass(frozen=True)
class DomainSpec:
    id: str
    holonomic: object
    stance_foot: SitePoint
    swing_foot: SitePoint
    next: str


def domain_specs(model):
    out = {}
    for k, d in model.domains.items():
        out[k] = DomainSpec(k, holonomic_set(model, d["constraints"]),
                            SitePoint.from_dict(d["stance_foot"]),
                            SitePoint.from_dict(d["swing_foot"]), d["next"])
    for k, d in out.items():
        if d.next not in out:
            raise ConfigError(f"domain {k} points to unknown domain {d.next!r}")
    return out


# -- integration ------------------------------------------------------------

def _rk4_args(model, hs, baumgarte):
    a, b = (0.0, 0.0) if baumgarte is None else baumgarte
    return (*model._dyn_args(), *hs.kernel_args(), hs.reference, float(a), float(b))


def integrate_step(model, state, u, holonomic, dt, substeps=1, baumgarte=None,
                   drift_tol=1e-6):
    """RK4 over ``substeps`` steps of ``dt`` with the input held constant."""
    f = model.B @ np.asarray(u, dtype=float)
    q, qd, k, flag = K.rk4_run(*_rk4_args(model, holonomic, baumgarte), state.q, state.qdot, f,
                               dt, substeps, 0, 0.0, 0.0, False)
    if flag == 2:
        raise SimulationError("non-finite state during integration", state=state)
    new = FullState(q, qd, state.t + substeps * dt)
    drift = np.max(np.abs(holonomic.residual(model, q)), initial=0.0)
    if drift > drift_tol:
        raise SimulationError(f"holonomic drift {drift:.2e} exceeds {drift_tol:.1e}", state=new)
    return new


def detect_guard(height, h0, h1, velocity=None, tol=1e-10):
    """Crossing fraction in [0, 1] of a descending zero crossing, or None.

    ``height(theta)`` evaluates the guard at a fraction of the step. Ascending
    crossings are ignored; a crossing whose ``velocity(theta)`` is not
    negative is grazing and reported as no event.
    """
    if not (h0 > 0.0 and h1 <= 0.0):
        return None
    if h1 == 0.0:
        theta = 1.0
    else:
        theta = brentq(height, 0.0, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    if abs(height(theta)) > tol:
        # brentq stops on the bracket width; finish with bisection on the value
        lo, hi = 0.0, 1.0
        for _ in range(200):
            theta = 0.5 * (lo + hi)
            v = height(theta)
            if abs(v) <= tol:
                break
            lo, hi = (theta, hi) if v > 0 else (lo, theta)
    if velocity is not None and velocity(theta) >= 0.0:
        log.warning("grazing guard contact at fraction %.3g ignored", theta)
        return None
    return theta


def stance_base_ik(sub, qs, qs_dot, foot_pose, stance_site):
    """Subsystem base pose and rate from joint data and a flat stance foot.

    ``foot_pose`` is the world (x, z, pitch) of ``stance_site`` recorded at
    touchdown. Returns (qbar_B, qbar_B_dot).
    """
    qbar = np.r_[np.zeros(3), qs]
    qbar = place_on_contact(sub, qbar, stance_site.link, stance_site.point, foot_pose)
    org, th, vel, om, acc = K.kinematics(*sub._args(), qbar, np.zeros_like(qbar))
    i = sub.link_index(stance_site.link)
    pos, v, _ = K.point_state(org, th, vel, om, acc, i, *stance_site.point)
    J, _ = K.point_jacobian(sub._anc, sub._kind, sub._pivot, org, vel, i, pos, v, qbar, np.zeros_like(qbar))
    base_dot = -np.linalg.solve(J[:, :3], J[:, 3:] @ qs_dot)
    return qbar[:3], base_dot


# -- log ----------------------------------------------------------------------

DOMAIN_CODES = {"ps": 0, "pns": 1}


def log_columns(model):
    cols = ["t", "step", "domain", "tau", "sigma"]
    cols += [f"q_{c}" for c in model.coord_names]
    cols += [f"qd_{c}" for c in model.coord_names]
    cols += [f"u_{a}" for a in model.actuated]
    qs = model.partition["q_s"]
    cols += [f"y_{c}" for c in qs] + [f"yd_{c}" for c in qs]
    cols += ["V", "clf_lhs", "clf_bound", "delta", "Vdot_model", "Vdot_mid", "Vdot_end"]
    cols += [f"lam_{i}" for i in range(6)]
    nb = 3 + len(qs)
    cols += [f"force_term_{i}" for i in range(nb)]
    cols += [f"est_sum_{i}" for i in range(nb)]
    cols += [f"true_sum_{i}" for i in range(nb)]
    return cols


@dataclass
class SimLog:
    columns: list
    rows: list = field(default_factory=list)
    status: str = "ok"
    message: str = ""
    steps: int = 0
    step_starts: list = field(default_factory=list)
    impacts: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def data(self):
        if not self.rows:
            return np.zeros((0, len(self.columns)))
        return np.vstack(self.rows)

    def col(self, name):
        return self.data[:, self.columns.index(name)]

    def cols(self, prefix):
        idx = [i for i, c in enumerate(self.columns) if c.startswith(prefix)]
        return self.data[:, idx]

    def write_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([repr(float(v)) for v in r])
        return path

    @classmethod
    def read_csv(cls, path):
        with Path(path).open() as fh:
            rd = csv.reader(fh)
            cols = next(rd)
            rows = [np.array([float(v) for v in r]) for r in rd]
        return cls(cols, rows)


# -- walking ------------------------------------------------------------------

def human_gains(cfg):
    """Scalar output gains for the human side, derived like the prosthesis gains."""
    clf = make_clf(1, np.diag([cfg.q_kp, cfg.q_kd]), cfg.eps)
    Kp, Kd = clf.gains()
    return float(Kp[0, 0]) if cfg.kp is None else cfg.kp, float(Kd[0, 0]) if cfg.kd is None else cfg.kd


def nominal_state(model, gait, domain="ps"):
    """State on the gait at tau = 0 with the stance foot flat at the origin."""
    g = gait[domain].subset(model.actuated)
    spec = model.domains[domain]
    yd, d1, _ = g.desired(0.0, 0.0)
    rate = 1.0 / g.clock_period
    q = np.zeros(model.eta)
    qd = np.zeros(model.eta)
    idx = model.coord_indices(model.actuated)
    q[idx] = yd
    qd[idx] = d1 * rate
    st = SitePoint.from_dict(spec["stance_foot"])
    q = place_on_contact(model, q, st.link, st.point, np.zeros(3))
    hs = holonomic_set(model, spec["constraints"])
    J = hs.jacobian(model, q)
    base = np.arange(3)
    rest = np.setdiff1d(np.arange(model.eta), base)
    foot = slice(hs.n_lock_rows, None)
    qd[base] = -np.linalg.solve(J[foot][:, base], J[foot][:, rest] @ qd[rest])
    return FullState(q, qd, 0.0)


class Walker:
    """Runs the two-domain hybrid system with a prosthesis controller."""

    def __init__(self, model, gait, ctrl_cfg=ControllerConfig(), sim_cfg=SimConfig()):
        self.model = model
        self.gait = gait
        self.ccfg = ctrl_cfg
        self.scfg = sim_cfg
        self.sub = subsystem_model(model)
        self.domains = domain_specs(model)
        self.full = FullOrderOutputs(model, gait)
        self.kp_h, self.kd_h = human_gains(ctrl_cfg)
        self.frame = fixed_frame_link(model)
        self.qs_idx = model.coord_indices(model.partition["q_s"])
        self.u_h_idx = self.full.human
        self.u_s_idx = self.full.prost
        cols = log_columns(model)
        self._i_vdot_mid, self._i_vdot_end = cols.index("Vdot_mid"), cols.index("Vdot_end")
        self.sub_stance = {k: SitePoint.from_dict(v["subsystem_anchor"])
                           for k, v in model.domains.items() if v.get("subsystem_anchor")}

    # bundle assembly: what the prosthesis can measure
    def _bundle(self, dom, state, clock, zeta, contact, anchor_x):
        m = self.model
        q, qd = state.q, state.qdot
        if dom in self.sub_stance:
            qs, qsd = q[self.qs_idx], qd[self.qs_idx]
            pose, vel = stance_base_ik(self.sub, qs, qsd, contact, self.sub_stance[dom])
            return MeasurableBundle(pose, vel, qs.copy(), qsd.copy(), zeta, None, clock,
                                    state.t, dom)
        return measurable_transform(m, state, zeta, anchor_x, clock, dom)

    def _qbar_dd(self, q, qd, qdd):
        """Subsystem accelerations from full-order accelerations."""
        m = self.model
        org, th, vel, om, acc = K.kinematics(*m._args(), q, qd)
        i = self.frame
        pos, v, a = K.point_state(org, th, vel, om, acc, i, 0.0, 0.0)
        J, _ = K.point_jacobian(m._anc, m._kind, m._pivot, org, vel, i, pos, v, q, qd)
        base = J @ qdd + np.r_[a, 0.0]
        return np.r_[base, qdd[self.qs_idx]]

    def run(self, state=None, n_steps=None, max_ticks=None):
        """Walk ``n_steps`` domain transitions, or stop after ``max_ticks`` control ticks."""
        m, sc, cc = self.model, self.scfg, self.ccfg
        n_steps = sc.n_steps if n_steps is None else n_steps
        rng = np.random.default_rng(sc.seed)
        pc = ProsthesisController(self.sub, self.gait, cc, rng=rng)
        dom = sc.start_domain
        state = nominal_state(m, self.gait, dom) if state is None else state.copy()
        logd = SimLog(log_columns(m))
        logd.meta = {"variant": cc.variant, "dt": sc.dt, "control_rate": sc.control_rate,
                     "seed": sc.seed}
        if n_steps == 0:
            return logd
        spec = self.domains[dom]
        hs = spec.holonomic.with_reference(m, state.q)
        contact = point_pose(m, state.q, spec.stance_foot.link, spec.stance_foot.point)
        anchor_x = self._anchor_x(dom, state.q)
        t_dom = state.t
        step = 0
        period = 1.0 / sc.control_rate
        torso_nom = com_positions(m, state.q)[0, 1]
        Tstep = self.gait.step_time
        min_tau = self.gait.guard_min_tau
        if dom == "ps":
            logd.step_starts.append(state.copy())
        try:
            while step < n_steps:
                if max_ticks is not None and len(logd.rows) >= max_ticks:
                    break
                clock = state.t - t_dom
                if clock > sc.stall_factor * Tstep:
                    logd.status, logd.message = "stall", f"no touchdown after {clock:.2f} s"
                    break
                if com_positions(m, state.q)[0, 1] < sc.fall_fraction * torso_nom:
                    logd.status, logd.message = "fall", "torso below fall threshold"
                    break
                q, qd = state.q, state.qdot
                need_exact = dom not in self.sub_stance or cc.variant in ("IDCLFQP_Ff", "FL")
                zeta = np.zeros(3)
                if need_exact:
                    _, lam_fl, _ = self.full.full_fl(dom, q, qd, clock, self.kp_h, self.kd_h, hs)
                    zeta = lam_fl[:3]
                bundle = self._bundle(dom, state, clock, zeta, contact, anchor_x)
                out = pc.tick(bundle)
                u = np.zeros(len(m.actuated))
                u[self.u_s_idx] = out.u_s
                u[self.u_h_idx] = self.full.human_fl(dom, q, qd, clock, out.u_s, self.kp_h,
                                                     self.kd_h, hs)[self.u_h_idx]
                f = m.B @ u
                qdd, lam = K.constrained_accel(*m._dyn_args(), q, qd, f, *hs.kernel_args(),
                                               hs.reference, 0.0, 0.0)
                ob_full = self.full.maps[dom].evaluate(q, qd, clock)
                sigma = clock / self.gait[dom].clock_period
                row = self._row(dom, step, state, u, out, lam, qdd, bundle, pc, ob_full.tau,
                                sigma)
                guard_on = ob_full.tau >= min_tau
                start = state
                state, crossed = self._advance(state, f, hs, spec, guard_on, period)
                if not crossed:
                    # model Vdot at the middle and end of the hold interval, same input,
                    # so the log supports a Simpson cross-check of the recorded V
                    qm, vm = K.rk4(*_rk4_args(m, hs, sc.baumgarte), start.q, start.qdot, f,
                                   0.5 * period)
                    mid = FullState(qm, vm, start.t + 0.5 * period)
                    for s, i in ((mid, self._i_vdot_mid), (state, self._i_vdot_end)):
                        qdd1, _ = K.constrained_accel(*m._dyn_args(), s.q, s.qdot, f,
                                                      *hs.kernel_args(), hs.reference, 0.0, 0.0)
                        b1 = self._bundle(dom, s, s.t - t_dom, zeta, contact, anchor_x)
                        row[i] = self._vdot(pc, b1, s, qdd1)
                logd.rows.append(row)
                if crossed:
                    dom = spec.next
                    spec = self.domains[dom]
                    hs = spec.holonomic.with_reference(m, state.q)
                    state, _ = impact_map(m, state, hs)
                    logd.impacts.append(state.t)
                    contact = point_pose(m, state.q, spec.stance_foot.link, spec.stance_foot.point)
                    anchor_x = self._anchor_x(dom, state.q)
                    t_dom = state.t
                    step += 1
                    if dom == "ps":
                        logd.step_starts.append(state.copy())
                drift = np.max(np.abs(hs.residual(m, state.q)), initial=0.0)
                if drift > sc.drift_tol:
                    raise SimulationError(f"holonomic drift {drift:.2e}", state=state)
        except SolverError as exc:
            logd.status, logd.message = "solver", str(exc)
        except SimulationError as exc:
            logd.status, logd.message = "diverged", str(exc)
        except IdclfError as exc:
            logd.status, logd.message = "diverged", str(exc)
        logd.steps = step
        logd.meta["final_state"] = state
        return logd

    def _anchor_x(self, dom, q):
        spec = self.model.domains[dom]
        st = SitePoint.from_dict(spec["stance_ankle"])
        return float(point_pose(self.model, q, st.link, st.point)[0])

    def _advance(self, state, f, hs, spec, guard_on, period):
        """Integrate one control period; stops at touchdown. Returns (state, crossed)."""
        m, sc = self.model, self.scfg
        sw = spec.swing_foot
        link = m.link_index(sw.link)
        args = _rk4_args(m, hs, sc.baumgarte)
        nsub = sc.substeps
        q, qd, k, flag = K.rk4_run(*args, state.q, state.qdot, f, sc.dt, nsub, link,
                                   float(sw.point[0]), float(sw.point[1]), guard_on)
        t = state.t + k * sc.dt
        if flag == 2:
            raise SimulationError("non-finite state", state=FullState(q, qd, t))
        if flag == 0:
            return FullState(q, qd, t), False

        def step(theta):
            return K.rk4(*args, q, qd, f, theta * sc.dt)

        def height(theta):
            qn, vn = step(theta)
            return K.site_height(*m._args(), qn, vn, link, *sw.point)[0]

        def velocity(theta):
            qn, vn = step(theta)
            return K.site_height(*m._args(), qn, vn, link, *sw.point)[1]

        h0 = K.site_height(*m._args(), q, qd, link, *sw.point)[0]
        theta = detect_guard(height, h0, height(1.0), velocity)
        if theta is None:
            qn, vn = step(1.0)
            return FullState(qn, vn, t + sc.dt), False
        qn, vn = step(theta)
        return FullState(qn, vn, t + theta * sc.dt), True

    def _row(self, dom, step, state, u, out, lam, qdd, bundle, pc, tau, sigma):
        m = self.model
        nb = 3 + len(self.qs_idx)
        ndom = len(m.partition["q_s"])
        y = out.y if out.y is not None else np.full(ndom, np.nan)
        yd = out.ydot if out.ydot is not None else np.full(ndom, np.nan)
        force = out.force_term if out.force_term is not None else np.full(nb, np.nan)
        est = np.full(nb, np.nan)
        true = np.full(nb, np.nan)
        vdot = np.nan
        lam6 = np.full(6, np.nan)
        lam6[:lam.size] = lam
        qb, qbd = bundle.qbar, bundle.qbar_dot
        hs_sub = pc.hsets[dom]
        if hs_sub.count:
            terms = subsystem_terms(self.sub, qb, qbd)
            Jh = hs_sub.jacobian(self.sub, qb)
            true = Jh.T @ lam[3:] + terms.Jf.T @ lam[:3]
            if out.lam is not None:
                est = out.force_term + Jh.T @ out.lam
        vdot = self._vdot(pc, bundle, state, qdd)
        return np.r_[state.t, step, DOMAIN_CODES.get(dom, -1), tau, sigma, state.q, state.qdot, u, y, yd,
                     out.clf_value, out.clf_lhs, out.clf_bound, out.delta, vdot, np.nan, np.nan, lam6,
                     force, est, true]

    def _vdot(self, pc, bundle, state, qdd):
        """CLF rate along the true motion, from full-order accelerations."""
        ob = pc.maps[bundle.domain].evaluate(bundle.qbar, bundle.qbar_dot, bundle.clock,
                                             bundle.anchor_x)
        LFV, LGV = clf_derivative_terms(pc.clf, ob.xi)
        return LFV + LGV @ (ob.J_y @ self._qbar_dd(state.q, state.qdot, qdd) + ob.drift)


def initial_state(model, gait, ctrl_cfg=None, sim_cfg=SimConfig(), warmup_steps=None):
    """Start state of a prosthesis-stance step after discarding transient steps.

    Transients are removed by walking ``warmup_steps`` full strides (two
    domains each) from the nominal tau = 0 pose under feedback linearization.
    """
    n = sim_cfg.warmup_steps if warmup_steps is None else warmup_steps
    state = nominal_state(model, gait, "ps")
    if n == 0:
        return state
    cfg = ControllerConfig(variant="FL") if ctrl_cfg is None else ctrl_cfg
    w = Walker(model, gait, cfg, sim_cfg)
    lg = w.run(state, 2 * n)
    if lg.status != "ok":
        raise SimulationError(f"warm-up walk failed: {lg.message}")
    s = lg.step_starts[-1].copy()
    s.q[0] = 0.0
    s.t = 0.0
    return s


def stride_distances(log):
    """Inf-norm distance between consecutive prosthesis-stance start states.

    The forward position is excluded since it grows by one stride each time.
    """
    s = log.step_starts
    return np.array([np.max(np.abs(np.r_[b.q[1:] - a.q[1:], b.qdot - a.qdot]))
                     for a, b in zip(s, s[1:])])


def walk(model, gait, ctrl_cfg=ControllerConfig(), n_steps=10, dt=1e-4, sim_cfg=None,
         state=None):
    """Walk ``n_steps`` domain transitions; returns the ``SimLog``."""
    sc = sim_cfg if sim_cfg is not None else SimConfig(dt=dt, n_steps=n_steps)
    return Walker(model, gait, ctrl_cfg, sc).run(state, n_steps)


# -- scenario files -------------------------------------------------------------

def sim_config_from_dict(d):
    known = set(SimConfig.__dataclass_fields__)
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown simulation settings: {sorted(extra)}")
    kw = dict(d)
    if kw.get("baumgarte") is not None:
        kw["baumgarte"] = tuple(float(v) for v in kw["baumgarte"])
    try:
        return SimConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"missing file {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
