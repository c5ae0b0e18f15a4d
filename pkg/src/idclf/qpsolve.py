"""Dense strictly convex QP solver (dual active set, Goldfarb-Idnani).

Problem form::

    min 0.5 v^T H v + g^T v   s.t.  A_eq v = b_eq,  A_in v <= b_in

Multipliers follow ``H v + g + A_eq^T lam + A_in^T mu = 0`` with ``mu >= 0``.

The dual method starts at the unconstrained minimizer and adds violated
constraints one at a time, most violated first (ties resolved to the smallest
row index, equalities before inequalities), dropping inequalities whose
multiplier would turn negative. Equalities are never dropped. Each step
direction comes from a small KKT solve on the current active set, and the
final active set is re-solved once so that results are reproducible bit for
bit for identical inputs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import io as spio
from scipy import linalg

from .errors import IllConditioned, Infeasible, MaxIterations


@dataclass
class QPProblem:
    hess: np.ndarray
    grad: np.ndarray
    A_eq: np.ndarray = None
    b_eq: np.ndarray = None
    A_in: np.ndarray = None
    b_in: np.ndarray = None
    layout: dict = field(default_factory=dict)

    def __post_init__(self):
        self.hess = np.atleast_2d(np.asarray(self.hess, dtype=float))
        self.grad = np.asarray(self.grad, dtype=float).ravel()
        n = self.grad.size
        if self.hess.shape != (n, n):
            raise ValueError(f"hess has shape {self.hess.shape}, expected ({n}, {n})")
        if np.max(np.abs(self.hess - self.hess.T), initial=0.0) > 1e-9 * max(1.0, np.abs(self.hess).max()):
            raise ValueError("hess must be symmetric")
        for a, b in (("A_eq", "b_eq"), ("A_in", "b_in")):
            A = getattr(self, a)
            A = np.zeros((0, n)) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
            if A.size == 0:
                A = A.reshape(0, n)
            B = getattr(self, b)
            B = np.zeros(A.shape[0]) if B is None else np.asarray(B, dtype=float).ravel()
            if A.shape[1] != n or B.size != A.shape[0]:
                raise ValueError(f"{a}/{b} dimensions inconsistent with {n} variables")
            setattr(self, a, A)
            setattr(self, b, B)

    @property
    def n(self):
        return self.grad.size

    def objective(self, v):
        return float(0.5 * v @ self.hess @ v + self.grad @ v)


@dataclass
class QPResult:
    x: np.ndarray
    lam_eq: np.ndarray
    mu_in: np.ndarray
    status: str
    active: tuple
    iterations: int
    residuals: dict


def kkt_residuals(p, x, lam, mu):
    """Infinity-norm KKT residuals of a candidate primal/dual pair."""
    stat = p.hess @ x + p.grad + p.A_eq.T @ lam + p.A_in.T @ mu
    slack = p.b_in - p.A_in @ x
    return {
        "stationarity": float(np.max(np.abs(stat), initial=0.0)),
        "primal_eq": float(np.max(np.abs(p.A_eq @ x - p.b_eq), initial=0.0)),
        "primal_in": float(max(0.0, -np.min(slack, initial=0.0))),
        "dual": float(max(0.0, -np.min(mu, initial=0.0))),
        "complementarity": float(np.max(np.abs(mu * slack), initial=0.0)),
    }


class _Active:
    """Active-set bookkeeping for the dual method (constraints n^T x >= d)."""

    def __init__(self, H, g, N, d, n_eq):
        self.H, self.g, self.N, self.d, self.n_eq = H, g, N, d, n_eq
        self.idx = []

    def kkt(self, rhs_top, rhs_bot):
        n = self.H.shape[0]
        Na = self.N[:, self.idx]
        m = Na.shape[1]
        K = np.zeros((n + m, n + m))
        K[:n, :n] = self.H
        K[:n, n:] = Na
        K[n:, :n] = Na.T
        sol = np.linalg.solve(K, np.r_[rhs_top, rhs_bot])
        return sol[:n], sol[n:]

    def direction(self, p):
        """z = (projected inverse Hessian) n_p and r = N* n_p."""
        if not self.idx:
            return linalg.cho_solve(self.chol, self.N[:, p]), np.zeros(0)
        return self.kkt(self.N[:, p], np.zeros(len(self.idx)))


def solve_qp(p, tol=1e-10, max_iter=None, warm_start=None, prox=1e-6, max_outer=200):
    """Solve ``p``; returns a ``QPResult``.

    ``warm_start`` is an optional active set from an earlier result; it is
    used only if that set is primal and dual feasible for ``p``, otherwise the
    solver starts cold. Positive semidefinite Hessians are handled by a
    proximal-point outer loop with weight ``prox``.
    """
    H = p.hess
    try:
        linalg.cho_factor(H)
        return _solve_strict(p, tol, max_iter, warm_start)
    except linalg.LinAlgError:
        pass
    x = np.zeros(p.n)
    for k in range(max_outer):
        sub = QPProblem(H + prox * np.eye(p.n), p.grad - prox * x, p.A_eq, p.b_eq,
                        p.A_in, p.b_in, p.layout)
        res = _solve_strict(sub, tol, max_iter, None)
        step = np.max(np.abs(res.x - x))
        x = res.x
        if step <= 1e-12 * max(1.0, np.max(np.abs(x))):
            break
    else:
        raise MaxIterations("proximal iterations exhausted", x=x)
    final = _polish(p, res.active, p.A_eq.shape[0])
    if final is None:
        return QPResult(x, res.lam_eq, res.mu_in, "optimal", res.active, k + 1,
                        kkt_residuals(p, x, res.lam_eq, res.mu_in))
    return _finish(p, *final, res.active, k + 1)


def _normalize(p):
    """Constraints as n^T v >= d with unit-norm rows."""
    A = np.vstack([p.A_eq, -p.A_in])
    b = np.r_[p.b_eq, -p.b_in]
    scale = np.linalg.norm(A, axis=1)
    scale[scale == 0] = 1.0
    return (A / scale[:, None]).T, b / scale, scale


def _polish(p, active, n_eq):
    """Exact solve on a fixed active set: (x, lam, mu) or None if singular."""
    A_act = np.vstack([p.A_eq] + [p.A_in[[i - n_eq for i in active if i >= n_eq]]])
    b_act = np.r_[p.b_eq, p.b_in[[i - n_eq for i in active if i >= n_eq]]]
    n, m = p.n, A_act.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = p.hess
    K[:n, n:] = A_act.T
    K[n:, :n] = A_act
    try:
        sol = np.linalg.solve(K, np.r_[-p.grad, b_act])
    except np.linalg.LinAlgError:
        return None
    x, mult = sol[:n], sol[n:]
    lam = mult[:p.A_eq.shape[0]]
    mu = np.zeros(p.A_in.shape[0])
    mu[[i - n_eq for i in active if i >= n_eq]] = mult[p.A_eq.shape[0]:]
    return x, lam, mu


def _finish(p, x, lam, mu, active, it):
    res = kkt_residuals(p, x, lam, mu)
    return QPResult(x, lam, mu, "optimal", tuple(active), it, res)


def _solve_strict(p, tol, max_iter, warm_start):
    n = p.n
    n_eq = p.A_eq.shape[0]
    N, d, scale = _normalize(p)
    m_tot = N.shape[1]
    if max_iter is None:
        max_iter = 10 * (n + m_tot) + 50
    st = _Active(p.hess, p.grad, N, d, n_eq)
    st.chol = linalg.cho_factor(p.hess)
    if np.linalg.cond(p.hess) > 1e14:
        raise IllConditioned("Hessian condition number above 1e14")

    x = -linalg.cho_solve(st.chol, p.grad)
    u = np.zeros(0)
    if warm_start:
        cand = sorted(set(range(n_eq)) | {i for i in warm_start if n_eq <= i < m_tot})
        st.idx = cand
        try:
            xw, w = st.kkt(-p.grad, d[cand])
            u_w = -w
            if np.all(u_w[[k for k, i in enumerate(cand) if i >= n_eq]] >= -tol):
                x, u = xw, u_w
            else:
                st.idx = []
        except np.linalg.LinAlgError:
            st.idx = []
    sign = np.ones(m_tot)  # equality rows may be flipped so the violation is negative

    it = 0
    while True:
        s = N.T @ x - d
        viol = np.where(np.arange(m_tot) < n_eq, -np.abs(s), s)
        viol[st.idx] = 0.0
        thresh = -tol * (1.0 + np.abs(d))
        cand = np.nonzero(viol < thresh)[0]
        if cand.size == 0:
            break
        eq_cand = cand[cand < n_eq]
        pick = eq_cand if eq_cand.size else cand
        pidx = pick[np.argmin(viol[pick])]
        if pidx < n_eq and s[pidx] > 0:
            N[:, pidx] *= -1.0
            d[pidx] *= -1.0
            sign[pidx] *= -1.0
        u_plus = np.r_[u, 0.0]
        while True:
            it += 1
            if it > max_iter:
                lam, mu = _unpack(u, st.idx, sign, scale, n_eq, m_tot)
                raise MaxIterations("dual active-set iteration limit reached", x=x,
                                    residuals=kkt_residuals(p, x, lam, mu))
            try:
                z, r = st.direction(pidx)
            except np.linalg.LinAlgError:
                raise IllConditioned("singular active-set KKT system", x=x) from None
            t1, k_drop = np.inf, -1
            for k, i in enumerate(st.idx):
                if i >= n_eq and r[k] > 0:
                    ratio = u_plus[k] / r[k]
                    if ratio < t1:
                        t1, k_drop = ratio, k
            zn = z @ N[:, pidx]
            s_p = N[:, pidx] @ x - d[pidx]
            t2 = np.inf if np.max(np.abs(z)) <= 1e-14 or zn <= 1e-14 else -s_p / zn
            t = min(t1, t2)
            if not np.isfinite(t):
                lam, mu = _unpack(u, st.idx, sign, scale, n_eq, m_tot)
                raise Infeasible("constraints are infeasible", x=x,
                                 residuals=kkt_residuals(p, x, lam, mu))
            u_plus = u_plus + t * np.r_[-r, 1.0]
            if np.isfinite(t2):
                x = x + t * z
            if t == t2:
                st.idx.append(pidx)
                u = u_plus
                break
            u_plus = np.delete(u_plus, k_drop)
            del st.idx[k_drop]
            u = u_plus[:-1]

    active = sorted(st.idx)
    x_p = _polish(p, active, n_eq)
    if x_p is None:
        lam, mu = _unpack(u, st.idx, sign, scale, n_eq, m_tot)
        return _finish(p, x, lam, mu, active, it)
    return _finish(p, *x_p, active, it)


def _unpack(u, idx, sign, scale, n_eq, m_tot):
    full = np.zeros(m_tot)
    full[idx] = u
    full *= sign / scale
    return -full[:n_eq], full[n_eq:]


# -- problem dump -----------------------------------------------------------

_DUMP_FIELDS = ("hess", "grad", "A_eq", "b_eq", "A_in", "b_in")


def dump_qp(p, directory):
    """Write ``p`` as matrix-market files plus a JSON layout into ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for name in _DUMP_FIELDS:
        arr = np.atleast_2d(getattr(p, name))
        if name in ("grad", "b_eq", "b_in"):
            arr = arr.reshape(-1, 1)
        spio.mmwrite(str(out / f"{name}.mtx"), arr, precision=17)
    layout = {k: [v.start, v.stop] if isinstance(v, slice) else v for k, v in p.layout.items()}
    (out / "layout.json").write_text(json.dumps({"n": p.n, "layout": layout}, indent=1))
    return out


def load_qp(directory):
    src = Path(directory)
    arrs = {}
    for name in _DUMP_FIELDS:
        a = np.asarray(spio.mmread(str(src / f"{name}.mtx")), dtype=float)
        arrs[name] = a.ravel() if name in ("grad", "b_eq", "b_in") else a
    meta = json.loads((src / "layout.json").read_text())
    n = meta["n"]
    for name in ("A_eq", "A_in"):
        arrs[name] = arrs[name].reshape(-1, n)
    layout = {k: slice(*v) if isinstance(v, list) else v for k, v in meta["layout"].items()}
    return QPProblem(layout=layout, **arrs)
