"""Holonomic constraints, constrained forward dynamics and the impact map."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import ConfigError, ConstraintRankError
from .model import FullState, _ROW_CODES

_EMPTY_PT = np.zeros((0, 2))


@dataclass(frozen=True)
class PointConstraint:
    link: str
    point: tuple[float, float]
    rows: tuple[str, ...] = ("x", "z", "pitch")

    @property
    def label(self):
        return f"{self.link}@({self.point[0]:g},{self.point[1]:g})"


@dataclass(frozen=True)
class CoordinateLock:
    joint: str
    coords: tuple[str, ...]

    @property
    def label(self):
        return f"lock:{self.joint}"


class HolonomicSet:
    """Stacked holonomic constraints: coordinate locks first, then points.

    ``reference`` holds the constrained positions the set should hold (used
    only for drift monitoring and optional Baumgarte stabilization).
    """

    def __init__(self, model, locks=(), points=(), reference=None, name=""):
        self.name = name
        self.locks = tuple(locks)
        self.points = tuple(points)
        for p in self.points:
            if not p.rows:
                raise ConfigError(f"constraint {p.label} selects no rows")
        self._lock_idx = np.array([model.coord_index(c) for l in self.locks for c in l.coords],
                                  dtype=np.int64)
        self._c_link = np.array([model.link_index(p.link) for p in self.points], dtype=np.int64)
        self._c_pt = (np.array([p.point for p in self.points], dtype=float).reshape(-1, 2)
                      if self.points else _EMPTY_PT)
        mask = np.zeros((len(self.points), 3), dtype=np.bool_)
        for j, p in enumerate(self.points):
            for r in p.rows:
                mask[j, _ROW_CODES[r]] = True
        self._c_mask = mask
        labels = [(l.label, c) for l in self.locks for c in l.coords]
        for p in self.points:
            labels.extend((p.label, r) for r in ("x", "z", "pitch") if r in p.rows)
        self.row_labels = labels
        self.n_lock_rows = len(self._lock_idx)
        self.reference = (np.zeros(self.count) if reference is None
                          else np.asarray(reference, dtype=float))

    @property
    def count(self):
        return len(self.row_labels)

    def kernel_args(self):
        return self._c_link, self._c_pt, self._c_mask, self._lock_idx

    def rows(self, model, q, qdot):
        """(J_h, Jdot_h qdot, constrained positions)."""
        return K.constraint_rows(*model._args(), model._anc, model._kind, model._pivot,
                                 np.asarray(q, float), np.asarray(qdot, float),
                                 *self.kernel_args())

    def jacobian(self, model, q):
        J, _, _ = self.rows(model, q, np.zeros(model.eta))
        return J

    def with_reference(self, model, q):
        """Copy whose reference is the constrained positions at ``q``."""
        _, _, pos = self.rows(model, q, np.zeros(model.eta))
        return HolonomicSet(model, self.locks, self.points, pos, self.name)

    def residual(self, model, q):
        _, _, pos = self.rows(model, q, np.zeros(model.eta))
        return pos - self.reference


def holonomic_set(model, name):
    """Build a constraint set declared in the model config."""
    try:
        spec = model.constraint_specs[name]
    except KeyError:
        raise ConfigError(f"unknown constraint set {name!r}") from None
    locks, points = [], []
    for c in spec:
        if "lock" in c:
            locks.append(CoordinateLock(c["lock"], tuple(model.joint_of(c["lock"]).coord_names())))
        else:
            points.append(PointConstraint(c["link"], tuple(float(v) for v in c["point"]),
                                          tuple(c.get("rows", ("x", "z", "pitch")))))
    hs = HolonomicSet(model, locks, points, name=name)
    return hs


@dataclass
class Wrench:
    """Constraint multipliers, fixed-joint wrench first when present."""

    lam: np.ndarray
    n_lock: int = 0

    @property
    def F_f(self):
        return self.lam[:self.n_lock]

    @property
    def lam_g(self):
        return self.lam[self.n_lock:]


def _diagnose(J, holonomic):
    """Raise naming the first constraint row that is linearly dependent."""
    labels = holonomic.row_labels
    rank = 0
    for r in range(J.shape[0]):
        if np.linalg.matrix_rank(J[:r + 1], tol=1e-9) == rank:
            label, row = labels[r]
            raise ConstraintRankError(
                f"constraint {label} row {row} is linearly dependent on earlier rows",
                constraint=label)
        rank += 1
    raise ConstraintRankError("singular constrained dynamics (inertia not positive definite?)")


def _solve(model, q, qd, gen_force, holonomic, baumgarte):
    a, b = (0.0, 0.0) if baumgarte is None else baumgarte
    args = model._dyn_args()
    try:
        qdd, lam = K.constrained_accel(*args, q, qd, gen_force, *holonomic.kernel_args(),
                                       holonomic.reference, float(a), float(b))
    except np.linalg.LinAlgError:
        _diagnose(holonomic.jacobian(model, q), holonomic)
    J = holonomic.jacobian(model, q)
    if J.shape[0] and np.linalg.matrix_rank(J, tol=1e-9) < J.shape[0]:
        _diagnose(J, holonomic)
    return qdd, lam


def generalized_force(model, u, external=None):
    f = model.B @ np.asarray(u, dtype=float)
    if external is not None:
        f = f + external
    return f


def constraint_wrench(model, state, u, holonomic, external=None):
    """Constraint wrench lambda_h that keeps the holonomic set satisfied."""
    q = model.check_q(state.q)
    qd = model.check_q(state.qdot, "qdot")
    _, lam = _solve(model, q, qd, generalized_force(model, u, external), holonomic, None)
    return Wrench(lam, holonomic.n_lock_rows)


def constrained_accel(model, state, u, holonomic, baumgarte=None, external=None,
                      return_wrench=False):
    """qdd = D^-1 (-H + B u + J_h^T lambda_h), from one KKT solve.

    ``baumgarte`` is an optional (2 zeta omega, omega^2) pair for drift studies.
    """
    q = model.check_q(state.q)
    qd = model.check_q(state.qdot, "qdot")
    qdd, lam = _solve(model, q, qd, generalized_force(model, u, external), holonomic, baumgarte)
    if return_wrench:
        return qdd, Wrench(lam, holonomic.n_lock_rows)
    return qdd


def accel_function(model, holonomic, baumgarte=None):
    """Fast closure f(q, qd, gen_force) -> (qdd, lambda) for integration loops."""
    a, b = (0.0, 0.0) if baumgarte is None else baumgarte
    args = model._dyn_args()
    kargs = holonomic.kernel_args()
    ref = holonomic.reference

    def f(q, qd, gen_force):
        return K.constrained_accel(*args, q, qd, gen_force, *kargs, ref, float(a), float(b))

    return f


def impact_map(model, state_pre, holonomic):
    """Plastic impact onto ``holonomic``: positions kept, velocities projected.

    Returns the post-impact state and the impulsive constraint wrench.
    """
    q = model.check_q(state_pre.q)
    qd = model.check_q(state_pre.qdot, "qdot")
    D, _ = K.dynamics(*model._dyn_args(), q, np.zeros_like(q))
    J = holonomic.jacobian(model, q)
    if J.shape[0] and np.linalg.matrix_rank(J, tol=1e-9) < J.shape[0]:
        _diagnose(J, holonomic)
    try:
        qd_post, neg_imp = K.kkt_solve(D, J, D @ qd, np.zeros(J.shape[0]))
    except np.linalg.LinAlgError:
        _diagnose(J, holonomic)
    return FullState(q.copy(), qd_post, state_pre.t), -neg_imp
