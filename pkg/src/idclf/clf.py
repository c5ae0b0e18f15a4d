"""Rapidly exponentially stabilizing CLF built from the output double integrator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ConfigError, SolverError


def double_integrator(m):
    """(F, G) of xi = (y, ydot) with ydot' = nu for ``m`` outputs."""
    F = np.zeros((2 * m, 2 * m))
    F[:m, m:] = np.eye(m)
    G = np.zeros((2 * m, m))
    G[m:, :] = np.eye(m)
    return F, G


def care_residual(P, Q, m):
    F, G = double_integrator(m)
    return F.T @ P + P @ F - P @ G @ G.T @ P + Q


def _newton_kleinman(F, G, Q, P0, iters=50, tol=1e-12):
    P = P0
    for _ in range(iters):
        Ac = F - G @ G.T @ P
        P_new = linalg.solve_continuous_lyapunov(Ac.T, -(Q + P @ G @ G.T @ P))
        P_new = 0.5 * (P_new + P_new.T)
        if np.max(np.abs(P_new - P)) <= tol * max(1.0, np.max(np.abs(P))):
            return P_new
        P = P_new
    return P


def solve_care(m_s, Q, tol=1e-8):
    """Solve F^T P + P F - P G G^T P + Q = 0 for the output double integrator.

    Stable invariant subspace of the Hamiltonian via an ordered Schur form,
    refined by Newton-Kleinman iterations when the residual is above ``tol``.
    """
    Q = np.asarray(Q, dtype=float)
    n = 2 * m_s
    if Q.shape != (n, n):
        raise ConfigError(f"Q must be {n}x{n}")
    if np.max(np.abs(Q - Q.T)) > 1e-12 or np.linalg.eigvalsh(Q).min() <= 0:
        raise ConfigError("Q must be symmetric positive definite")
    F, G = double_integrator(m_s)
    Z = np.block([[F, -G @ G.T], [-Q, -F.T]])
    T, U, sdim = linalg.schur(Z, sort="lhp")
    P = None
    if sdim == n:
        U11, U21 = U[:n, :n], U[n:, :n]
        try:
            P = np.linalg.solve(U11.T, U21.T).T
            P = 0.5 * (P + P.T)
        except np.linalg.LinAlgError:
            P = None
    if P is None or np.max(np.abs(care_residual(P, Q, m_s))) > tol:
        # any P0 making F - G G^T P0 Hurwitz seeds the Newton iteration
        P0 = np.block([[np.eye(m_s), np.eye(m_s)], [np.eye(m_s), 2 * np.eye(m_s)]])
        P = _newton_kleinman(F, G, Q, P0 if P is None else P)
    res = np.max(np.abs(care_residual(P, Q, m_s)))
    if res > tol or np.linalg.eigvalsh(P).min() <= 0:
        raise SolverError(f"CARE did not converge (residual {res:.3e})", x=P,
                          residuals={"care": res})
    return P


@dataclass(frozen=True)
class CLFData:
    """CARE solution and its epsilon-scaled form."""

    P: np.ndarray
    P_eps: np.ndarray
    eps: float
    gamma: float
    Q: np.ndarray
    m_s: int

    @property
    def c1(self):
        return float(np.linalg.eigvalsh(self.P).min())

    @property
    def c2(self):
        return float(np.linalg.eigvalsh(self.P).max())

    @property
    def c3(self):
        return self.gamma

    def gains(self):
        """Output PD gains (Kp, Kd) of the stabilizer nu = -(1/eps) G^T P_eps xi.

        This input achieves Vdot <= -(gamma/eps) V exactly.
        """
        m = self.m_s
        K = self.P[m:, :]
        return K[:, :m] / self.eps ** 2, K[:, m:] / self.eps


def default_Q(m_s, kp=100.0, kd=20.0):
    return np.diag(np.r_[np.full(m_s, kp), np.full(m_s, kd)])


def make_clf(m_s, Q=None, eps=0.25):
    if not 0 < eps <= 1:
        raise ConfigError("eps must lie in (0, 1]")
    Q = default_Q(m_s) if Q is None else np.asarray(Q, dtype=float)
    P = solve_care(m_s, Q)
    E = np.diag(np.r_[np.full(m_s, 1.0 / eps), np.ones(m_s)])
    P_eps = E @ P @ E
    gamma = float(np.linalg.eigvalsh(Q).min() / np.linalg.eigvalsh(P).max())
    return CLFData(P, P_eps, float(eps), gamma, Q, m_s)


def clf_value(clf, xi):
    xi = np.asarray(xi, dtype=float)
    return float(xi @ clf.P_eps @ xi)


def clf_derivative_terms(clf, xi):
    """(L_F V, L_G V) so that Vdot = L_F V + L_G V nu."""
    xi = np.asarray(xi, dtype=float)
    F, G = double_integrator(clf.m_s)
    Pe = clf.P_eps
    return float(xi @ (F.T @ Pe + Pe @ F) @ xi), 2.0 * xi @ Pe @ G
