"""Kalman primitives shared by the single-agent and collaborative updates."""

from __future__ import annotations

import logging
from functools import lru_cache

import numpy as np
from scipy.stats import chi2

from .state import apply_error_state, condition_covariance

logger = logging.getLogger(__name__)

GATE_CONFIDENCE = 0.95


@lru_cache(maxsize=256)
def chi2_threshold(dof, confidence=GATE_CONFIDENCE):
    return float(chi2.ppf(confidence, dof))


def mahalanobis_sq(residual, S):
    residual = np.atleast_1d(np.asarray(residual, dtype=float))
    L = np.linalg.cholesky(S)
    y = np.linalg.solve(L, residual)
    return float(y @ y)


def gate_chi2(residual, S_true, dof=None, confidence=GATE_CONFIDENCE):
    """Chi-square test of an innovation against its unscaled covariance.

    Returns ``True`` to accept.  A singular ``S_true`` is rejected.
    """
    residual = np.atleast_1d(np.asarray(residual, dtype=float))
    dof = residual.size if dof is None else dof
    try:
        d2 = mahalanobis_sq(residual, np.atleast_2d(S_true))
    except np.linalg.LinAlgError:
        logger.debug("gate: singular innovation covariance, rejecting")
        return False
    return d2 <= chi2_threshold(dof, confidence)


def compress_rows(H, r):
    """QR-compress a tall isotropic-noise measurement system."""
    if H.shape[0] <= H.shape[1]:
        return H, r
    Q, R = np.linalg.qr(H, mode="reduced")
    return R, Q.T @ r


def ekf_update(x, H, r, R):
    """Standard EKF update of ``x`` with ``r ~ H dx + n``, ``n ~ N(0, R)``.

    Uses the Joseph form for the covariance.
    """
    P = x.cov
    PHt = P @ H.T
    S = H @ PHt + R
    K = np.linalg.solve(S, PHt.T).T
    dx = K @ r
    IKH = np.eye(P.shape[0]) - K @ H
    P_new = IKH @ P @ IKH.T + K @ R @ K.T
    y = apply_error_state(x, dx)
    y.cov = condition_covariance(P_new)
    return y, dx
