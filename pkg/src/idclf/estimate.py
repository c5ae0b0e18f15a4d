"""Interaction-force estimation from discrete velocity samples.

The residual dynamics at the previous sample is

    F_{k-1} = D(q_{k-1}) qdd_est + H(q_{k-1}, qd_{k-1}) - B u_{k-1} - J_h^T lam_{k-1}

with ``qdd_est`` the finite difference of the last two velocity samples. It
equals D (qdd_est - qdd_expected) without ever forming D^-1.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import IdclfError, TimingError


class NotReady(IdclfError):
    """No residual sample is available yet."""


def accel_estimate(qdot_k, qdot_km1, t_k, t_km1):
    dt = t_k - t_km1
    if not dt > 0:
        raise TimingError(f"non-increasing sample times ({t_km1} -> {t_k})")
    return (np.asarray(qdot_k, dtype=float) - np.asarray(qdot_km1, dtype=float)) / dt


def residual_dynamics(D, H, B, Jh, qdd_est, u, lam):
    return D @ qdd_est + H - B @ u - Jh.T @ lam


@dataclass
class _Sample:
    D: np.ndarray
    H: np.ndarray
    B: np.ndarray
    Jh: np.ndarray
    u: np.ndarray
    lam: np.ndarray
    qdot: np.ndarray
    t: float


class EstimatorState:
    """Previous-sample data and a ring of the last ``N`` residuals."""

    def __init__(self, N=1):
        if int(N) < 1:
            raise ValueError("window length must be at least 1")
        self.N = int(N)
        self.ring = deque(maxlen=self.N)
        self.prev = None

    def clear(self):
        self.ring.clear()
        self.prev = None

    def forget_sample(self):
        """Drop the previous sample but keep the ring (window kept across impacts)."""
        self.prev = None

    def store(self, terms, qbar, qbar_dot, u, Jh, lam, t):
        if self.prev is not None and not t > self.prev.t:
            raise TimingError(f"non-increasing sample times ({self.prev.t} -> {t})")
        self.prev = _Sample(terms.D, terms.H, terms.B, np.asarray(Jh), np.asarray(u, float).copy(),
                            np.asarray(lam, float).copy(), np.asarray(qbar_dot, float).copy(),
                            float(t))


def update_estimator(state, terms, qbar_dot, t):
    """Push the residual at the previous sample, given the new velocity sample."""
    s = state.prev
    if s is None:
        return None
    qdd = accel_estimate(qbar_dot, s.qdot, t, s.t)
    F = residual_dynamics(s.D, s.H, s.B, s.Jh, qdd, s.u, s.lam)
    state.ring.append(F)
    return F


def average_residual(state):
    """Mean of the stored residuals; raises ``NotReady`` while the ring is empty."""
    if not state.ring:
        raise NotReady("no residual sample yet")
    return np.mean(np.stack(state.ring), axis=0)
