"""Prosthesis controllers: feedback linearization, PD and the ID-CLF-QP family.

The prosthesis controller only ever receives a ``MeasurableBundle``. The
full-order helpers at the bottom of this module (human-side feedback
linearization and the exact interaction wrench) belong to the simulator.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import _kernels as K
from .clf import clf_derivative_terms, clf_value, make_clf
from .constraints import holonomic_set
from .errors import ConfigError, OutputRankError
from .estimate import EstimatorState, NotReady, average_residual, update_estimator
from .gait import OutputMap
from .model import MeasurableBundle, SitePoint, subsystem_terms
from .qpsolve import QPProblem, dump_qp, solve_qp

VARIANTS = ("FL", "PD", "IDCLFQP", "IDCLFQP_Ff", "IDCLFQP_Fest")
QP_VARIANTS = ("IDCLFQP", "IDCLFQP_Ff", "IDCLFQP_Fest")
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ControllerConfig:
    """Controller settings. ``kp``/``kd`` of ``None`` take the CARE-derived gains."""

    variant: str = "IDCLFQP_Fest"
    eps: float = 0.25
    q_kp: float = 100.0
    q_kd: float = 20.0
    kp: float | None = None
    kd: float | None = None
    sigma: float = 1e-3
    rho: float = 1e3
    u_max: tuple = (120.0, 175.0)
    N_avg: int = 1
    clear_on_impact: bool = True
    noise_std: float = 0.0
    pd_kp: tuple = (300.0, 400.0)
    pd_kd: tuple = (15.0, 20.0)
    dump_dir: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown controller variant {self.variant!r}")
        if not 0 < self.eps < 1:
            raise ConfigError("eps must lie in (0, 1)")
        for name in ("sigma", "rho", "q_kp", "q_kd"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("kp", "kd"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive")
        if not all(u > 0 for u in self.u_max):
            raise ConfigError("u_max must be positive")
        if int(self.N_avg) < 1:
            raise ConfigError("N_avg must be at least 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")


def controller_config_from_dict(cfg):
    if cfg.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported controller schema_version {cfg.get('schema_version')!r}")
    known = set(ControllerConfig.__dataclass_fields__)
    extra = set(cfg) - known - {"schema_version"}
    if extra:
        raise ConfigError(f"unknown controller settings: {sorted(extra)}")
    kw = {k: v for k, v in cfg.items() if k in known}
    for k in ("u_max", "pd_kp", "pd_kd"):
        if k in kw:
            kw[k] = tuple(float(v) for v in kw[k])
    try:
        return ControllerConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_controller_config(path):
    try:
        return controller_config_from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"controller config is not valid JSON: {exc}") from exc


def controller_config_to_dict(cfg):
    d = asdict(cfg)
    d["schema_version"] = SCHEMA_VERSION
    return d


@dataclass
class ControlOutput:
    u_s: np.ndarray
    Upsilon: np.ndarray | None = None
    clf_value: float = np.nan
    clf_lhs: float = np.nan
    clf_bound: float = np.nan
    delta: float = 0.0
    qdd: np.ndarray | None = None
    lam: np.ndarray | None = None
    force_term: np.ndarray | None = None
    y: np.ndarray | None = None
    ydot: np.ndarray | None = None
    tau: float = np.nan
    status: str = "ok"


# -- building blocks --------------------------------------------------------

def affine_dynamics(D, H, B, Jh, Jdq, f_ext=None):
    """qddot and lambda as affine functions of u under hard holonomic constraints.

    Returns (a0, A1, l0, L1) with qddot = a0 + A1 u, lambda = l0 + L1 u.
    """
    n, m = D.shape[0], Jh.shape[0]
    Kmat = np.zeros((n + m, n + m))
    Kmat[:n, :n] = D
    Kmat[:n, n:] = Jh.T
    Kmat[n:, :n] = Jh
    top = -H if f_ext is None else f_ext - H
    rhs = np.zeros((n + m, 1 + B.shape[1]))
    rhs[:n, 0] = top
    rhs[n:, 0] = -Jdq
    rhs[:n, 1:] = B
    sol = np.linalg.solve(Kmat, rhs)
    return sol[:n, 0], sol[:n, 1:], -sol[n:, 0], -sol[n:, 1:]


def feedback_linearize(D, H, B, Jh, Jdq, ob, nu, f_ext=None, free=None, u_fixed=None):
    """Input making yddot = nu under the constrained dynamics.

    ``free`` selects the actuator columns solved for; the remaining columns
    are held at ``u_fixed``. Returns the full input vector.
    """
    a0, A1, _, _ = affine_dynamics(D, H, B, Jh, Jdq, f_ext)
    m = B.shape[1]
    free = np.arange(m) if free is None else np.asarray(free)
    u = np.zeros(m)
    rhs = np.asarray(nu, float) - ob.drift - ob.J_y @ a0
    if u_fixed is not None:
        fixed = np.setdiff1d(np.arange(m), free)
        u[fixed] = u_fixed
        rhs = rhs - ob.J_y @ A1[:, fixed] @ u[fixed]
    L = ob.J_y @ A1[:, free]
    if L.shape[0] != L.shape[1] or np.linalg.cond(L) > 1e12:
        raise OutputRankError("decoupling matrix is singular")
    u[free] = np.linalg.solve(L, rhs)
    return u


def pd_joint_controller(q, qdot, q_sp, qdot_sp, kp, kd, u_max):
    """Joint PD, saturated at +-u_max."""
    u = -np.asarray(kp) * (np.asarray(q) - q_sp) - np.asarray(kd) * (np.asarray(qdot) - qdot_sp)
    return np.clip(u, -np.asarray(u_max), np.asarray(u_max))


def pd_output(ob, Kp, Kd):
    """nu_pd = -Kp y - Kd ydot."""
    return -Kp @ ob.y - Kd @ ob.ydot


def build_idclfqp(D, H, B, Jh, Jdq_h, ob, clf, force_term, cfg, nu_pd, u_max, upsilon_prev=None):
    """Assemble the ID-CLF-QP over Upsilon = (qddot, u_s, lambda_h, delta).

    Equality: the subsystem dynamics with ``force_term`` added on the right.
    Cost: ||J_c qddot + Jdot_c qdot - mu_pd||^2 + sigma ||Upsilon - prev||^2
    + rho delta, with the holonomic rows of J_c soft. Inequalities: the CLF
    decrease row relaxed by delta, torque box, delta >= 0.
    """
    n, m, nh = D.shape[0], B.shape[1], Jh.shape[0]
    if ob.J_y.shape != (m, n):
        raise ConfigError("output count must equal the subsystem input count")
    nv = n + m + nh + 1
    iq, iu, il, idl = slice(0, n), slice(n, n + m), slice(n + m, n + m + nh), n + m + nh
    Jc = np.vstack([ob.J_y, Jh])
    c = np.r_[ob.drift - nu_pd, Jdq_h]
    Hs = np.zeros((nv, nv))
    Hs[iq, iq] = 2.0 * Jc.T @ Jc
    Hs += 2.0 * cfg.sigma * np.eye(nv)
    g = np.zeros(nv)
    g[iq] = 2.0 * Jc.T @ c
    if upsilon_prev is not None:
        g -= 2.0 * cfg.sigma * upsilon_prev
    g[idl] += cfg.rho
    A_eq = np.zeros((n, nv))
    A_eq[:, iq] = D
    A_eq[:, iu] = -B
    A_eq[:, il] = -Jh.T
    b_eq = -H + force_term
    xi = ob.xi
    V = clf_value(clf, xi)
    LFV, LGV = clf_derivative_terms(clf, xi)
    A_in = np.zeros((2 * m + 2, nv))
    b_in = np.zeros(2 * m + 2)
    A_in[0, iq] = LGV @ ob.J_y
    A_in[0, idl] = -1.0
    b_in[0] = -clf.gamma / clf.eps * V - LFV - LGV @ ob.drift
    A_in[1:m + 1, iu] = np.eye(m)
    A_in[m + 1:2 * m + 1, iu] = -np.eye(m)
    b_in[1:2 * m + 1] = np.r_[u_max, u_max]
    A_in[-1, idl] = -1.0
    layout = {"qdd": iq, "u": iu, "lam": il, "delta": idl}
    return QPProblem(Hs, g, A_eq, b_eq, A_in, b_in, layout)


# -- the prosthesis controller ----------------------------------------------

class ProsthesisController:
    """Per-tick subsystem controller working from measurable quantities only."""

    def __init__(self, sub, gait, cfg=ControllerConfig(), rng=None):
        self.sub = sub
        self.gait = gait
        self.cfg = cfg
        self.m = sub.B.shape[1]
        self.clf = make_clf(self.m, np.diag(np.r_[np.full(self.m, cfg.q_kp),
                                                  np.full(self.m, cfg.q_kd)]), cfg.eps)
        Kp, Kd = self.clf.gains()
        self.Kp = Kp if cfg.kp is None else cfg.kp * np.eye(self.m)
        self.Kd = Kd if cfg.kd is None else cfg.kd * np.eye(self.m)
        self.u_max = np.asarray(cfg.u_max, dtype=float)
        if self.u_max.size != self.m:
            raise ConfigError(f"u_max needs {self.m} entries")
        names = [c for j in sub.joints[1:] for c in j.coord_names()]
        self.out_names = tuple(a for a in sub.actuated if a in names)
        self.maps, self.hsets = {}, {}
        for dom, spec in sub.domains.items():
            params = gait[dom].subset(self.out_names)
            anchor = spec.get("subsystem_anchor")
            self.maps[dom] = OutputMap(sub, params, SitePoint.from_dict(sub.subsystem_spec["hip"]),
                                       None if anchor is None else SitePoint.from_dict(anchor))
            self.hsets[dom] = holonomic_set(sub, spec["constraints"])
        self.estimator = EstimatorState(cfg.N_avg)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.upsilon_prev = None
        self.domain = None
        self.n_dumps = 0

    def reset(self, domain):
        """Enter ``domain`` (called at start and after every impact)."""
        self.domain = domain
        self.upsilon_prev = None
        if self.cfg.clear_on_impact:
            self.estimator.clear()
        else:
            self.estimator.forget_sample()

    def tick(self, bundle):
        if not isinstance(bundle, MeasurableBundle):
            raise TypeError("prosthesis controller accepts a MeasurableBundle only")
        if bundle.domain != self.domain:
            self.reset(bundle.domain)
        sub, cfg = self.sub, self.cfg
        qb, qbd = bundle.qbar, bundle.qbar_dot
        if cfg.noise_std > 0:
            qbd = qbd + self.rng.normal(0.0, cfg.noise_std, qbd.size)
        ob = self.maps[self.domain].evaluate(qb, qbd, bundle.clock, bundle.anchor_x)
        hs = self.hsets[self.domain]
        variant = cfg.variant
        stance = hs.count > 0
        if not stance and variant != "PD":
            variant = "FL"
        terms = subsystem_terms(sub, qb, qbd)
        Jh, Jdq_h, _ = hs.rows(sub, qb, qbd)
        nu = pd_output(ob, self.Kp, self.Kd)
        out = ControlOutput(np.zeros(self.m), y=ob.y, ydot=ob.ydot, tau=ob.tau)
        xi = ob.xi
        out.clf_value = clf_value(self.clf, xi)
        if variant == "PD":
            idx = sub.coord_indices(self.out_names)
            sp, spd = qb[idx] - ob.y, qbd[idx] - ob.ydot
            out.u_s = pd_joint_controller(qb[idx], qbd[idx], sp, spd, cfg.pd_kp, cfg.pd_kd,
                                          self.u_max)
            return out
        if variant == "FL":
            f_ext = terms.Jf.T @ bundle.zeta
            out.u_s = feedback_linearize(terms.D, terms.H, terms.B, Jh, Jdq_h, ob, nu, f_ext)
            out.force_term = f_ext
            return out
        if variant == "IDCLFQP_Ff":
            force = terms.Jf.T @ bundle.zeta
        elif variant == "IDCLFQP_Fest":
            update_estimator(self.estimator, terms, qbd, bundle.t)
            try:
                force = average_residual(self.estimator)
            except NotReady:
                force = np.zeros(sub.eta)
        else:
            force = np.zeros(sub.eta)
        p = build_idclfqp(terms.D, terms.H, terms.B, Jh, Jdq_h, ob, self.clf, force, cfg, nu,
                          self.u_max, self.upsilon_prev)
        if cfg.dump_dir is not None:
            dump_qp(p, Path(cfg.dump_dir) / f"qp_{self.n_dumps:06d}")
            self.n_dumps += 1
        res = solve_qp(p)
        v = res.x
        L = p.layout
        self.upsilon_prev = v.copy()
        out.Upsilon = v
        out.u_s = v[L["u"]].copy()
        out.qdd = v[L["qdd"]].copy()
        out.lam = v[L["lam"]].copy()
        out.delta = float(v[L["delta"]])
        out.force_term = force
        LFV, LGV = clf_derivative_terms(self.clf, xi)
        out.clf_lhs = LFV + LGV @ (ob.J_y @ out.qdd + ob.drift)
        out.clf_bound = -self.clf.gamma / self.clf.eps * out.clf_value + out.delta
        if variant == "IDCLFQP_Fest":
            self.estimator.store(terms, qb, qbd, out.u_s, Jh, out.lam, bundle.t)
        return out


# -- full-order helpers (simulation side) ------------------------------------

class FullOrderOutputs:
    """Outputs of every actuated joint on the full model, per domain."""

    def __init__(self, model, gait):
        self.model = model
        self.maps, self.hsets = {}, {}
        for dom, spec in model.domains.items():
            params = gait[dom].subset(model.actuated)
            self.maps[dom] = OutputMap(model, params, SitePoint.from_dict(spec["hip"]),
                                       SitePoint.from_dict(spec["stance_ankle"]))
            self.hsets[dom] = holonomic_set(model, spec["constraints"])
        self.human = np.array([i for i, a in enumerate(model.actuated)
                               if a not in model.partition["q_s"]])
        self.prost = np.array([i for i, a in enumerate(model.actuated)
                               if a in model.partition["q_s"]])

    def terms(self, dom, q, qd, clock, hset=None):
        m = self.model
        D, H = K.dynamics(*m._dyn_args(), q, qd)
        hs = self.hsets[dom] if hset is None else hset
        Jh, Jdq, _ = hs.rows(m, q, qd)
        ob = self.maps[dom].evaluate(q, qd, clock)
        return D, H, Jh, Jdq, ob

    def full_fl(self, dom, q, qd, clock, Kp, Kd, hset=None):
        """Joint feedback linearization of all outputs: (u, lambda_h, ob)."""
        D, H, Jh, Jdq, ob = self.terms(dom, q, qd, clock, hset)
        nu = -Kp * ob.y - Kd * ob.ydot
        u = feedback_linearize(D, H, self.model.B, Jh, Jdq, ob, nu)
        a0, A1, l0, L1 = affine_dynamics(D, H, self.model.B, Jh, Jdq)
        return u, l0 + L1 @ u, ob

    def human_fl(self, dom, q, qd, clock, u_s, Kp, Kd, hset=None):
        """Human inputs tracking the human outputs given the prosthesis torque."""
        D, H, Jh, Jdq, ob = self.terms(dom, q, qd, clock, hset)
        rows = self.human
        sub_ob = replace(ob, y=ob.y[rows], ydot=ob.ydot[rows], J_y=ob.J_y[rows],
                         Jdot_y=ob.Jdot_y[rows], drift=ob.drift[rows])
        nu = -Kp * sub_ob.y - Kd * sub_ob.ydot
        return feedback_linearize(D, H, self.model.B, Jh, Jdq, sub_ob, nu, free=self.human,
                                  u_fixed=u_s)
