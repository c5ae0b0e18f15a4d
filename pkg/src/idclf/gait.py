"""Bezier desired outputs, the state-based phase variable and output maps.

Each domain tracks a list of joint coordinates. A row is either
phase-modulated (its desired value is a Bezier in tau, a normalized hip
progression) or clock-modulated (a Bezier in the time elapsed in the domain
divided by ``clock_period``). The stance ankle is clock-modulated: with a flat
foot the stance chain is fully actuated, and making every joint a function
of tau would leave the decoupling matrix singular on the gait.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.special import comb

from . import _kernels as K
from .errors import ConfigError, ModelError, OutputRankError
from .model import SitePoint

SCHEMA_VERSION = 1
PHASE = "phase"
CLOCK = "clock"


# -- Bezier ---------------------------------------------------------------

def bezier(alpha, tau):
    """Value and first two tau-derivatives of Bezier rows at ``tau``.

    ``alpha`` is one coefficient row or a matrix of rows. ``tau`` is clamped
    to [0, 1].
    """
    a = np.asarray(alpha, dtype=float)
    b = a.shape[-1] - 1
    if b < 1:
        raise ConfigError("Bezier degree must be at least 1")
    s = min(max(float(tau), 0.0), 1.0)
    k = np.arange(b + 1)
    basis = comb(b, k) * s ** k * (1.0 - s) ** (b - k)
    val = a @ basis
    d1 = b * (np.diff(a, axis=-1) @ _bernstein(b - 1, s))
    if b >= 2:
        d2 = b * (b - 1) * (np.diff(a, n=2, axis=-1) @ _bernstein(b - 2, s))
    else:
        d2 = np.zeros_like(val)
    return val, d1, d2


def _bernstein(n, s):
    k = np.arange(n + 1)
    return comb(n, k) * s ** k * (1.0 - s) ** (n - k)


def bezier_fit(tau, values, degree):
    """Least-squares Bezier row through sampled values, endpoints interpolated."""
    tau = np.asarray(tau, dtype=float)
    values = np.asarray(values, dtype=float)
    B = np.stack([_bernstein(degree, s) for s in tau])
    i0, i1 = np.argmin(tau), np.argmax(tau)
    a0, a1 = values[i0], values[i1]
    rhs = values - B[:, 0] * a0 - B[:, -1] * a1
    inner, *_ = np.linalg.lstsq(B[:, 1:-1], rhs, rcond=None)
    return np.concatenate([[a0], inner, [a1]])


# -- phase variable --------------------------------------------------------

def phase_variable(p, pdot, calib):
    """tau = clamp((p - theta_plus) / (theta_minus - theta_plus), 0, 1).

    ``taudot`` is the unclamped rate so velocity feedback stays smooth.
    """
    th_p, th_m = calib
    span = th_m - th_p
    tau = min(max((p - th_p) / span, 0.0), 1.0)
    return tau, pdot / span


# -- gait parameters -------------------------------------------------------

@dataclass(frozen=True)
class GaitParams:
    """Desired outputs of one domain."""

    domain: str
    outputs: tuple[str, ...]
    alpha: np.ndarray
    basis: tuple[str, ...]
    tau_calib: tuple[float, float]
    clock_period: float
    next: str = ""

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float)
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        if alpha.ndim != 2 or alpha.shape[0] != len(self.outputs):
            raise ConfigError(f"gait {self.domain}: one coefficient row per output required")
        if alpha.shape[1] < 2:
            raise ConfigError(f"gait {self.domain}: Bezier degree must be at least 1")
        if len(self.basis) != len(self.outputs) or set(self.basis) - {PHASE, CLOCK}:
            raise ConfigError(f"gait {self.domain}: basis must list phase|clock per output")
        if self.tau_calib[0] == self.tau_calib[1]:
            raise ConfigError(f"gait {self.domain}: theta_plus equals theta_minus")
        if not self.clock_period > 0:
            raise ConfigError(f"gait {self.domain}: clock_period must be positive")

    @property
    def degree(self):
        return self.alpha.shape[1] - 1

    def subset(self, names):
        """Parameters restricted to the named outputs (order preserved)."""
        rows = [self.outputs.index(n) for n in names]
        return GaitParams(self.domain, tuple(names), self.alpha[rows],
                          tuple(self.basis[r] for r in rows), self.tau_calib,
                          self.clock_period, self.next)

    def desired(self, tau, sigma):
        """(y_d, dy_d/dtau or dsigma, second derivative) per output row."""
        n = len(self.outputs)
        val, d1, d2 = np.zeros(n), np.zeros(n), np.zeros(n)
        for arg, kind in ((tau, PHASE), (sigma, CLOCK)):
            rows = [i for i, b in enumerate(self.basis) if b == kind]
            if rows:
                v, a, c = bezier(self.alpha[rows], arg)
                val[rows], d1[rows], d2[rows] = v, a, c
        return val, d1, d2


@dataclass(frozen=True)
class Gait:
    """Per-domain gait parameters plus walking metadata."""

    domains: dict
    step_length: float
    step_time: float
    guard_min_tau: float = 0.5
    notes: str = ""

    def __getitem__(self, domain):
        try:
            return self.domains[domain]
        except KeyError:
            raise ConfigError(f"gait has no domain {domain!r}") from None

    def to_dict(self):
        doms = {}
        for k, g in self.domains.items():
            doms[k] = {"outputs": list(g.outputs), "basis": list(g.basis),
                       "alpha": g.alpha.tolist(), "tau_calib": list(g.tau_calib),
                       "clock_period": g.clock_period, "next": g.next}
        return {"schema_version": SCHEMA_VERSION, "notes": self.notes,
                "step_length": self.step_length, "step_time": self.step_time,
                "guard_min_tau": self.guard_min_tau, "domains": doms}


def gait_from_dict(cfg):
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported gait schema_version {cfg.get('schema_version')!r}")
    try:
        doms = {}
        for k, d in cfg["domains"].items():
            doms[k] = GaitParams(k, tuple(d["outputs"]), np.array(d["alpha"], dtype=float),
                                 tuple(d["basis"]), tuple(float(v) for v in d["tau_calib"]),
                                 float(d["clock_period"]), d.get("next", ""))
        return Gait(doms, float(cfg["step_length"]), float(cfg["step_time"]),
                    float(cfg.get("guard_min_tau", 0.5)), cfg.get("notes", ""))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed gait file: {exc}") from exc


def load_gait(path=None):
    """Load a gait file; ``None`` loads the bundled reference gait."""
    if path is None:
        text = resources.files("idclf.data").joinpath("reference_gait.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        return gait_from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"gait file is not valid JSON: {exc}") from exc


def save_gait(gait, path):
    text = json.dumps(gait.to_dict(), indent=1)
    # one line per flat list keeps the coefficient rows readable
    text = re.sub(r"\[\s+([^\[\]{}]*?)\s+\]", lambda m: "[" + " ".join(m.group(1).split()) + "]",
                  text)
    Path(path).write_text(text + "\n")


# -- outputs ---------------------------------------------------------------

@dataclass
class OutputBundle:
    """Output errors and their derivatives.

    ``drift`` is the state-dependent part of the output acceleration, so that
    ``yddot = J_y qddot + drift``. It equals ``Jdot_y qdot`` plus the second
    time derivative of clock-modulated references.
    """

    y: np.ndarray
    ydot: np.ndarray
    J_y: np.ndarray
    Jdot_y: np.ndarray
    tau: float
    taudot: float
    drift: np.ndarray = field(default=None)
    p: float = 0.0

    @property
    def xi(self):
        return np.concatenate([self.y, self.ydot])


class OutputMap:
    """Evaluates the outputs of one domain on a given model.

    The phase coordinate is ``p = x_hip - x_anchor``. When the anchor link is
    not part of ``model`` (prosthesis swing on the subsystem model) the
    anchor x is passed to ``evaluate`` and treated as stationary.
    """

    def __init__(self, model, params, hip, anchor=None):
        self.model = model
        self.params = params
        self.idx = model.coord_indices(params.outputs)
        hip = hip if isinstance(hip, SitePoint) else SitePoint.from_dict(hip)
        self.hip = (model.link_index(hip.link), float(hip.point[0]), float(hip.point[1]))
        self.anchor = None
        if anchor is not None:
            anchor = anchor if isinstance(anchor, SitePoint) else SitePoint.from_dict(anchor)
            self.anchor = (model.link_index(anchor.link), float(anchor.point[0]),
                           float(anchor.point[1]))
        th_p, th_m = params.tau_calib
        self.span = th_m - th_p
        self.phase_rows = np.array([b == PHASE for b in params.basis])

    def phase(self, q, qd, anchor_x=None):
        """(p, pdot, dp/dq, Jdot_p, Jdot_p qdot)."""
        m = self.model
        org, th, vel, om, acc = K.kinematics(*m._args(), q, qd)
        i, lx, lz = self.hip
        pos, v, a = K.point_state(org, th, vel, om, acc, i, lx, lz)
        J, Jd = K.point_jacobian(m._anc, m._kind, m._pivot, org, vel, i, pos, v, q, qd)
        p, pd, Jp, Jdp, bias = pos[0], v[0], J[0].copy(), Jd[0].copy(), a[0]
        if self.anchor is not None:
            i, lx, lz = self.anchor
            pos, v, a = K.point_state(org, th, vel, om, acc, i, lx, lz)
            J, Jd = K.point_jacobian(m._anc, m._kind, m._pivot, org, vel, i, pos, v, q, qd)
            p, pd, Jp, Jdp, bias = p - pos[0], pd - v[0], Jp - J[0], Jdp - Jd[0], bias - a[0]
        elif anchor_x is None:
            raise ModelError("phase needs an anchor link or an anchor_x value")
        else:
            p = p - anchor_x
        return p, pd, Jp, Jdp, bias

    def evaluate(self, q, qd, clock=0.0, anchor_x=None):
        g = self.params
        p, pd, Jp, Jdp, pbias = self.phase(q, qd, anchor_x)
        tau, taudot = phase_variable(p, pd, g.tau_calib)
        Tc = g.clock_period
        sigma = min(max(clock / Tc, 0.0), 1.0)
        yd, d1, d2 = g.desired(tau, sigma)
        n, eta = len(self.idx), len(q)
        ph = self.phase_rows
        # past the clock period the clocked reference holds its end value
        crate = 1.0 / Tc if 0.0 <= clock / Tc < 1.0 else 0.0
        rate = np.where(ph, taudot, crate)
        y = q[self.idx] - yd
        ydot = qd[self.idx] - d1 * rate
        J = np.zeros((n, eta))
        J[np.arange(n), self.idx] = 1.0
        Jdot = np.zeros((n, eta))
        dtau = Jp / self.span
        J[ph] -= np.outer(d1[ph], dtau)
        Jdot[ph] -= np.outer(d2[ph] * taudot, dtau) + np.outer(d1[ph], Jdp / self.span)
        drift = np.where(ph, -d2 * taudot ** 2 - d1 * pbias / self.span, -d2 * crate ** 2)
        return OutputBundle(y, ydot, J, Jdot, tau, taudot, drift, p)


def outputs(model, q, qdot, params, hip, anchor=None, clock=0.0, anchor_x=None):
    """One-shot output evaluation with a full-row-rank check on J_y."""
    ob = OutputMap(model, params, hip, anchor).evaluate(
        model.check_q(q), model.check_q(qdot, "qdot"), clock, anchor_x)
    if np.linalg.matrix_rank(ob.J_y, tol=1e-9) < ob.J_y.shape[0]:
        raise OutputRankError("output Jacobian lost full row rank")
    return ob


# -- reference gait design -------------------------------------------------

@dataclass(frozen=True)
class LegGeometry:
    hip: str
    knee: str
    ankle: str
    thigh: float
    shank: float


def leg_geometry(model, hip, knee, ankle):
    """Thigh and shank lengths measured between joint origins at q = 0."""
    q = np.zeros(model.eta)
    org, *_ = K.kinematics(*model._args(), q, q)

    def origin(joint):
        i = next(k for k, j in enumerate(model.joints) if j.name == joint)
        return org[i]

    h, k, a = origin(hip), origin(knee), origin(ankle)
    return LegGeometry(hip, knee, ankle, float(np.linalg.norm(k - h)),
                       float(np.linalg.norm(a - k)))


def leg_ik(leg, d):
    """Absolute thigh and shank pitches placing the ankle at hip + d (knee forward)."""
    dx, dz = d
    r = np.hypot(dx, dz)
    if r >= leg.thigh + leg.shank:
        raise ConfigError("gait design leaves the leg fully extended")
    phi = np.arctan2(-dx, -dz)
    a1 = np.arccos((leg.thigh ** 2 + r ** 2 - leg.shank ** 2) / (2 * leg.thigh * r))
    a2 = np.arccos((leg.shank ** 2 + r ** 2 - leg.thigh ** 2) / (2 * leg.shank * r))
    return phi - a1, phi + a2


def _smoother(t):
    return t ** 3 * (10 - 15 * t + 6 * t ** 2)


@dataclass(frozen=True)
class GaitDesign:
    """Cartesian knobs of the reference gait.

    The hip height is ``hip_height + hip_bob cos(th) + hip_drop sin(th)`` with
    ``th`` sweeping (-pi, pi) over the step, so height and vertical velocity
    match at the leg swap. A positive ``hip_drop`` lowers the hip through
    touchdown, which keeps the flat-footed stance ankle rotating forward; a
    level hip there stalls it and the clocked output loses rank.
    """

    step_length: float = 0.35
    step_time: float = 0.5
    hip_height: float = 0.8255
    hip_bob: float = 0.0
    hip_drop: float = 0.01
    clearance: float = 0.05
    landing_slope: float = 0.05
    torso_lean: float = 0.08
    overrun: float = 0.03
    degree: int = 9
    samples: int = 201


def _joint_profile(design, stance, swing, tau_d):
    """Joint angles (hip, knee, ankle) of both legs at design phase tau_d."""
    s = design.step_length
    p = -s / 2 + s * tau_d
    ph = 2 * np.pi * p / s
    zh = design.hip_height + design.hip_bob * np.cos(ph) + design.hip_drop * np.sin(ph)
    c, z = design.clearance, design.landing_slope
    x_sw = -s + 2 * s * _smoother(tau_d)
    z_sw = 16 * c * tau_d ** 2 * (1 - tau_d) ** 2 + z * tau_d ** 3 * (1 - tau_d)
    lean = design.torso_lean
    out = {}
    for leg, d in ((stance, (-p, -zh)), (swing, (x_sw - p, z_sw - zh))):
        t1, t2 = leg_ik(leg, d)
        out[leg.hip] = t1 - lean
        out[leg.knee] = t2 - t1
        out[leg.ankle] = -t2
    return out


def design_reference_gait(model, design=GaitDesign(), legs=None):
    """Fit the shipped reference gait from a parametric Cartesian walking pattern.

    Hip progression is uniform and the hip height is a cosine of it, level at
    both ends of the step so that the hip velocity carries over unchanged into
    the next domain. The swing ankle follows a quintic in x and a lift profile in
    z that lands with a small downward velocity, feet stay flat and the torso
    keeps a constant lean. The pattern is defined on
    ``tau_d in [0, 1 + overrun]`` and rescaled to [0, 1], so the nominal strike
    (``tau_d = 1``) happens just before the end of the Bezier range.
    """
    if legs is None:
        legs = {"l": leg_geometry(model, "lh", "lk", "la"),
                "r": leg_geometry(model, "rh", "pk", "pa")}
    e = design.overrun
    s = design.step_length
    tau_d = np.linspace(0.0, 1.0 + e, design.samples)
    tau = tau_d / (1.0 + e)
    doms = {}
    for dom, stance, swing in (("ps", "r", "l"), ("pns", "l", "r")):
        st, sw = legs[stance], legs[swing]
        prof = [_joint_profile(design, st, sw, t) for t in tau_d]
        names = ("lh", "lk", "la", "rh", "pk", "pa")
        alpha = np.array([bezier_fit(tau, [pr[n] for pr in prof], design.degree) for n in names])
        basis = tuple(CLOCK if n == st.ankle else PHASE for n in names)
        nxt = model.domains.get(dom, {}).get("next", "pns" if dom == "ps" else "ps")
        doms[dom] = GaitParams(dom, names, alpha, basis, (-s / 2, -s / 2 + s * (1 + e)),
                               design.step_time * (1 + e), nxt)
    return Gait(doms, s, design.step_time, 0.5,
                notes="Reference gait fitted to a parametric flat-foot walking pattern.")
