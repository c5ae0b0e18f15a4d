"""Planar floating-base rigid-body model.

A model is a tree of links. Each link hangs off its parent through one of
three joints:

* ``floating`` (root only): world x, z and absolute pitch.
* ``revolute``: one relative pitch angle about the attachment point.
* ``planar``: a 3-DOF joint whose coordinates are a world-aligned offset of the
  child origin from the attachment point plus a relative pitch. Locking these
  coordinates gives a rigid connection whose multipliers are the connection
  wrench (Fx, Fz, My) expressed in world axes at the child origin.

A root ``pinned`` joint (a revolute joint fixed to the world) is also allowed,
mostly for small test chains.

Angles are absolute at the floating base and relative at every other joint.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import _kernels as K
from .errors import ConfigError, ModelError

SCHEMA_VERSION = 1

_JOINT_CODES = {"floating": K.FLOATING, "revolute": K.REVOLUTE, "planar": K.PLANAR,
                "pinned": K.PINNED}
_ROW_CODES = {"x": 0, "z": 1, "pitch": 2}


@dataclass(frozen=True)
class LinkParams:
    """Mass properties of one link.

    ``com_offset`` is measured from the proximal joint along ``axis`` (a unit
    vector in the link frame), ``length`` is the distance to the distal joint
    along the same axis.
    """

    name: str
    mass: float
    length: float
    com_offset: float
    inertia_com: float
    axis: tuple[float, float] = (0.0, -1.0)

    def __post_init__(self):
        if not self.mass > 0:
            raise ConfigError(f"link {self.name}: mass must be positive")
        if not self.length > 0:
            raise ConfigError(f"link {self.name}: length must be positive")
        if self.inertia_com < 0:
            raise ConfigError(f"link {self.name}: inertia must be non-negative")
        if not 0 <= self.com_offset <= self.length:
            raise ConfigError(f"link {self.name}: com_offset outside [0, length]")
        if abs(np.hypot(*self.axis) - 1.0) > 1e-9:
            raise ConfigError(f"link {self.name}: axis must be a unit vector")

    @property
    def com_local(self):
        return np.asarray(self.axis) * self.com_offset


@dataclass(frozen=True)
class Joint:
    name: str
    kind: str
    parent: int
    attach: tuple[float, float] = (0.0, 0.0)

    @property
    def ndof(self):
        return 3 if self.kind in ("floating", "planar") else 1

    def coord_names(self):
        if self.ndof == 3:
            return [f"{self.name}_x", f"{self.name}_z", f"{self.name}_pitch"]
        return [self.name]


@dataclass(frozen=True)
class SitePoint:
    """A point fixed on a link, given in link-local coordinates."""

    link: str
    point: tuple[float, float] = (0.0, 0.0)

    @classmethod
    def from_dict(cls, d):
        return cls(d["link"], tuple(float(v) for v in d.get("point", (0.0, 0.0))))


class RobotModel:
    """Tree of planar links with an actuation map and a subsystem partition.

    Links must be listed parents-first. Coordinates are laid out in link order,
    each joint contributing ``Joint.ndof`` consecutive entries.
    """

    def __init__(self, links, joints, actuated, gravity=9.81, partition=None, name="model",
                 fixed_joint=None, constraint_sets=None, domains=None, subsystem=None,
                 torque_limits=None):
        if len(links) != len(joints):
            raise ConfigError("one joint per link required")
        self.name = name
        self.links = tuple(links)
        self.joints = tuple(joints)
        self.gravity = float(gravity)
        self.fixed_joint = fixed_joint
        self.constraint_specs = dict(constraint_sets or {})
        self.domains = dict(domains or {})
        self.subsystem_spec = dict(subsystem or {})
        self.torque_limits = dict(torque_limits or {})

        for i, j in enumerate(self.joints):
            if i == 0:
                if j.parent != -1 or j.kind not in ("floating", "pinned"):
                    raise ConfigError("first link must be the root (floating or pinned)")
            elif not 0 <= j.parent < i:
                raise ConfigError(f"link {links[i].name}: parent must precede child")
            elif j.kind not in ("revolute", "planar"):
                raise ConfigError(f"link {links[i].name}: bad joint kind {j.kind!r}")

        self.coord_names = []
        cstart = []
        for j in self.joints:
            cstart.append(len(self.coord_names))
            self.coord_names.extend(j.coord_names())
        if len(set(self.coord_names)) != len(self.coord_names):
            raise ConfigError("duplicate coordinate names")
        self._coord_index = {n: k for k, n in enumerate(self.coord_names)}
        self._link_index = {l.name: i for i, l in enumerate(self.links)}
        if len(self._link_index) != len(self.links):
            raise ConfigError("duplicate link names")

        self.actuated = tuple(actuated)
        for a in self.actuated:
            if a not in self._coord_index:
                raise ConfigError(f"unknown actuated coordinate {a!r}")
        B = np.zeros((self.eta, len(self.actuated)))
        for c, a in enumerate(self.actuated):
            B[self._coord_index[a], c] = 1.0
        self.B = B

        self.partition = None
        if partition is not None:
            parts = {k: tuple(partition[k]) for k in ("q_l", "q_f", "q_s")}
            flat = [c for k in ("q_l", "q_f", "q_s") for c in parts[k]]
            if sorted(flat) != sorted(self.coord_names) or len(set(flat)) != len(flat):
                raise ConfigError("partition must be disjoint and exhaustive")
            if len(parts["q_f"]) != 3:
                raise ConfigError("fixed-joint partition must have 3 coordinates")
            self.partition = parts

        eta = self.eta
        n = len(self.links)
        self._parent = np.array([j.parent for j in self.joints], dtype=np.int64)
        self._jtype = np.array([_JOINT_CODES[j.kind] for j in self.joints], dtype=np.int64)
        self._cstart = np.array(cstart, dtype=np.int64)
        self._attach = np.array([j.attach for j in self.joints], dtype=float).reshape(n, 2)
        self._com = np.array([l.com_local for l in self.links], dtype=float).reshape(n, 2)
        self._mass = np.array([l.mass for l in self.links], dtype=float)
        self._inertia = np.array([l.inertia_com for l in self.links], dtype=float)
        kind = np.zeros(eta, dtype=np.int64)
        pivot = np.zeros(eta, dtype=np.int64)
        own = np.zeros(eta, dtype=np.int64)
        for i, j in enumerate(self.joints):
            k = cstart[i]
            if j.ndof == 3:
                kind[k:k + 3] = (K.TRANS_X, K.TRANS_Z, K.ROT)
                own[k:k + 3] = i
            else:
                kind[k] = K.ROT
                own[k] = i
            pivot[k:k + j.ndof] = i
        anc = np.zeros((n, eta), dtype=np.bool_)
        for i in range(n):
            p = i
            while p >= 0:
                anc[i, own == p] = True
                p = self.joints[p].parent
        self._kind, self._pivot, self._anc = kind, pivot, anc

    # -- bookkeeping -------------------------------------------------------
    @property
    def eta(self):
        return len(self.coord_names)

    @property
    def n_links(self):
        return len(self.links)

    @property
    def total_mass(self):
        return float(self._mass.sum())

    def coord_index(self, name):
        try:
            return self._coord_index[name]
        except KeyError:
            raise ModelError(f"unknown coordinate {name!r}") from None

    def coord_indices(self, names):
        return np.array([self.coord_index(n) for n in names], dtype=np.int64)

    def link_index(self, name):
        if isinstance(name, (int, np.integer)):
            if not 0 <= name < self.n_links:
                raise ModelError(f"invalid body id {name}")
            return int(name)
        try:
            return self._link_index[name]
        except KeyError:
            raise ModelError(f"unknown link {name!r}") from None

    def joint_of(self, name):
        for j in self.joints:
            if j.name == name:
                return j
        raise ModelError(f"unknown joint {name!r}")

    def subtree(self, root):
        r = self.link_index(root)
        keep = [r]
        for i in range(r + 1, self.n_links):
            if self.joints[i].parent in keep:
                keep.append(i)
        return keep

    def _args(self):
        return (self._parent, self._jtype, self._cstart, self._attach)

    def _dyn_args(self):
        return (self._parent, self._jtype, self._cstart, self._attach, self._com,
                self._mass, self._inertia, self._anc, self._kind, self._pivot, self.gravity)

    def check_q(self, q, what="q"):
        q = np.asarray(q, dtype=float)
        if q.shape != (self.eta,):
            raise ModelError(f"{what} has shape {q.shape}, expected ({self.eta},)")
        return q


# -- state containers ------------------------------------------------------

@dataclass
class FullState:
    q: np.ndarray
    qdot: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.qdot = np.asarray(self.qdot, dtype=float)
        if self.q.shape != self.qdot.shape:
            raise ModelError("q and qdot lengths differ")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qdot))):
            raise ModelError("state has non-finite entries")

    def copy(self):
        return FullState(self.q.copy(), self.qdot.copy(), self.t)


@dataclass
class MeasurableBundle:
    """Locally available prosthesis information.

    ``base_pose``/``base_vel`` are the fixed-joint frame (x, z, pitch) and its
    rates, ``qs``/``qs_dot`` the subsystem joints, ``zeta`` the interaction
    wrench (Fx, Fz, My). ``anchor_x`` is the world x of the stance foot used by
    the phase variable when that foot does not belong to the subsystem.
    ``clock`` is the time elapsed in the current domain.
    """

    base_pose: np.ndarray
    base_vel: np.ndarray
    qs: np.ndarray
    qs_dot: np.ndarray
    zeta: np.ndarray = field(default_factory=lambda: np.zeros(3))
    anchor_x: float | None = None
    clock: float = 0.0
    t: float = 0.0
    domain: str = "ps"

    @property
    def qbar(self):
        return np.concatenate([self.base_pose, self.qs])

    @property
    def qbar_dot(self):
        return np.concatenate([self.base_vel, self.qs_dot])

    def as_vector(self):
        """Stacked (x_r_bar, x_s, zeta) vector of dimension n_s + 6 + 3."""
        return np.concatenate([self.base_pose, self.base_vel, self.qs, self.qs_dot, self.zeta])


# -- loading ---------------------------------------------------------------

def model_from_dict(cfg):
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported model schema_version {cfg.get('schema_version')!r}")
    if not cfg.get("links"):
        raise ConfigError("model config has no links")
    try:
        names = [l["name"] for l in cfg["links"]]
        links, joints = [], []
        for l in cfg["links"]:
            links.append(LinkParams(
                name=l["name"], mass=float(l["mass"]), length=float(l["length"]),
                com_offset=float(l["com_offset"]), inertia_com=float(l["inertia_com"]),
                axis=tuple(float(v) for v in l.get("axis", (0.0, -1.0)))))
            parent = l.get("parent")
            pidx = -1 if parent is None else names.index(parent)
            joints.append(Joint(l.get("joint_name", l["name"]), l["joint"], pidx,
                                tuple(float(v) for v in l.get("attach", (0.0, 0.0)))))
        return RobotModel(
            links, joints, cfg.get("actuated", []), gravity=cfg.get("gravity", 9.81),
            partition=cfg.get("partition"), name=cfg.get("name", "model"),
            fixed_joint=cfg.get("fixed_joint"), constraint_sets=cfg.get("constraint_sets"),
            domains=cfg.get("domains"), subsystem=cfg.get("subsystem"),
            torque_limits=cfg.get("torque_limits"))
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"malformed model config: {exc}") from exc


def load_model(path=None):
    """Load a model config; ``None`` loads the bundled human-prosthesis model."""
    if path is None:
        text = resources.files("idclf.data").joinpath("human_prosthesis.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"model config is not valid JSON: {exc}") from exc
    return model_from_dict(cfg)


def subsystem_model(model):
    """The robotic subsystem as a standalone floating-base model.

    The child of the fixed joint becomes the root; its floating coordinates
    are the subsystem base coordinates (x, z, pitch).
    """
    if model.fixed_joint is None:
        raise ModelError("model has no fixed joint")
    root = next(i for i, j in enumerate(model.joints) if j.name == model.fixed_joint)
    keep = model.subtree(root)
    remap = {old: new for new, old in enumerate(keep)}
    links, joints = [], []
    for old in keep:
        j = model.joints[old]
        links.append(model.links[old])
        if old == root:
            joints.append(Joint("base", "floating", -1))
        else:
            joints.append(Joint(j.name, j.kind, remap[j.parent], j.attach))
    sub_links = {model.links[i].name for i in keep}
    sub_coords = set()
    for j in joints[1:]:
        sub_coords.update(j.coord_names())
    actuated = [a for a in model.actuated if a in sub_coords]
    csets = {}
    for name, spec in model.constraint_specs.items():
        csets[name] = [c for c in spec if "link" in c and c["link"] in sub_links]
    limits = {k: v for k, v in model.torque_limits.items() if k in sub_coords}
    return RobotModel(links, joints, actuated, gravity=model.gravity,
                      name=f"{model.name}:subsystem", constraint_sets=csets,
                      domains=model.domains, subsystem=model.subsystem_spec,
                      torque_limits=limits)


# -- kinematics ------------------------------------------------------------

def link_frames(model, q, qdot=None):
    """Origins, absolute pitches, origin velocities and angular rates."""
    q = model.check_q(q)
    qd = np.zeros_like(q) if qdot is None else model.check_q(qdot, "qdot")
    org, th, vel, om, _ = K.kinematics(*model._args(), q, qd)
    return org, th, vel, om


def _point(model, q, qd, body, point):
    i = model.link_index(body)
    org, th, vel, om, acc = K.kinematics(*model._args(), q, qd)
    pos, v, a = K.point_state(org, th, vel, om, acc, i, float(point[0]), float(point[1]))
    J, Jd = K.point_jacobian(model._anc, model._kind, model._pivot, org, vel, i, pos, v, q, qd)
    return pos, th[i], v, om[i], a, J, Jd


def point_pose(model, q, body, point=(0.0, 0.0)):
    """World (x, z, pitch) of a point attached to ``body``."""
    q = model.check_q(q)
    pos, th, *_ = _point(model, q, np.zeros_like(q), body, point)
    return np.array([pos[0], pos[1], th])


def point_velocity(model, q, qdot, body, point=(0.0, 0.0)):
    q = model.check_q(q)
    qd = model.check_q(qdot, "qdot")
    _, _, v, om, *_ = _point(model, q, qd, body, point)
    return np.array([v[0], v[1], om])


def point_jacobian(model, q, body, point=(0.0, 0.0)):
    """3 x eta Jacobian of a point, rows ordered (x, z, pitch)."""
    q = model.check_q(q)
    *_, J, _ = _point(model, q, np.zeros_like(q), body, point)
    return J


def point_jacobian_dot(model, q, qdot, body, point=(0.0, 0.0)):
    """Time derivative of ``point_jacobian`` along qdot."""
    q = model.check_q(q)
    qd = model.check_q(qdot, "qdot")
    *_, Jd = _point(model, q, qd, body, point)
    return Jd


def point_bias_accel(model, q, qdot, body, point=(0.0, 0.0)):
    """Jdot(q, qdot) qdot for a point: its acceleration when qddot = 0."""
    q = model.check_q(q)
    qd = model.check_q(qdot, "qdot")
    _, _, _, _, a, _, _ = _point(model, q, qd, body, point)
    return np.array([a[0], a[1], 0.0])


def com_positions(model, q):
    q = model.check_q(q)
    org, th, _, _ = link_frames(model, q)
    c, s = np.cos(th), np.sin(th)
    loc = model._com
    return org + np.stack([c * loc[:, 0] + s * loc[:, 1], -s * loc[:, 0] + c * loc[:, 1]], axis=1)


# -- dynamics --------------------------------------------------------------

def inertia_matrix(model, q):
    q = model.check_q(q)
    D, _ = K.dynamics(*model._dyn_args(), q, np.zeros_like(q))
    return D


def bias_forces(model, q, qdot):
    q = model.check_q(q)
    qd = model.check_q(qdot, "qdot")
    _, H = K.dynamics(*model._dyn_args(), q, qd)
    return H


def dynamics_terms(model, q, qdot):
    """(D, H) in one pass."""
    q = model.check_q(q)
    qd = model.check_q(qdot, "qdot")
    return K.dynamics(*model._dyn_args(), q, qd)


def energies(model, q, qdot):
    """(kinetic, potential) energy; potential is zero at z = 0."""
    q = model.check_q(q)
    qd = model.check_q(qdot, "qdot")
    D = inertia_matrix(model, q)
    kinetic = 0.5 * qd @ D @ qd
    potential = model.gravity * float(model._mass @ com_positions(model, q)[:, 1])
    return float(kinetic), potential


@dataclass
class SubsystemTerms:
    """Dynamics terms of the equivalent subsystem at one configuration."""

    D: np.ndarray
    H: np.ndarray
    B: np.ndarray
    Jf: np.ndarray


def subsystem_terms(sub, qbar, qbar_dot):
    """(D_bar, H_bar, B_bar, J_f_bar) for the subsystem model ``sub``."""
    qbar = sub.check_q(qbar, "qbar")
    qbar_dot = sub.check_q(qbar_dot, "qbar_dot")
    D, H = K.dynamics(*sub._dyn_args(), qbar, qbar_dot)
    Jf = point_jacobian(sub, qbar, 0, (0.0, 0.0))
    return SubsystemTerms(D, H, sub.B, Jf)


def fixed_frame_link(model):
    """Index of the link whose origin is the fixed-joint frame."""
    return next(i for i, j in enumerate(model.joints) if j.name == model.fixed_joint)


def measurable_transform(model, state, F_f, anchor_x=None, clock=0.0, domain="ps"):
    """Map a full-order state and interaction wrench to the measurable bundle."""
    q = model.check_q(state.q)
    qd = model.check_q(state.qdot, "qdot")
    i = fixed_frame_link(model)
    pose = point_pose(model, q, i)
    vel = point_velocity(model, q, qd, i)
    qs_idx = model.coord_indices(model.partition["q_s"])
    return MeasurableBundle(pose, vel, q[qs_idx].copy(), qd[qs_idx].copy(),
                            np.asarray(F_f, dtype=float).copy(), anchor_x, clock,
                            state.t, domain)


def place_on_contact(model, q, body, point, target):
    """Shift/rotate the floating base so that ``(body, point)`` has pose ``target``.

    Joint coordinates are untouched. Pitch adds along the chain, so the base
    pitch is set first and the base translation then moves every point alike.
    """
    if model.joints[0].kind != "floating":
        raise ModelError("placement needs a floating base")
    q = model.check_q(q).copy()
    q[:3] = 0.0
    q[2] = target[2] - point_pose(model, q, body, point)[2]
    q[0:2] = np.asarray(target[:2]) - point_pose(model, q, body, point)[:2]
    return q
