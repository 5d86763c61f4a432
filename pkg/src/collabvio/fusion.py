"""Cross-agent updates fused with covariance intersection.

Remote estimates arrive without cross-correlation information, so every
collaborative update inflates the participants' covariances by ``1/omega``
(covariance intersection) before a Kalman update of the *local* state.
Outlier gating always uses the unscaled covariances.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .kalman import gate_chi2
from .state import (
    FEATURE_DIM,
    IMU_DIM,
    POSE_DIM,
    InverseDepthFeature,
    SlidingWindow,
    apply_error_state,
    condition_covariance,
    feature_offset,
    pose_offset,
    skew,
)
from .vision import Observation, Track, range_null_split, track_system, triangulate

logger = logging.getLogger(__name__)

OMEGA_MIN = 0.05
SIGMA_CONSTRAINT = 1e-3
MAX_CONDITION = 1e12


@dataclass
class RemoteSnapshot:
    """Shareable part of another agent's estimate.

    Track observations carry window indices in ``Observation.frame``.
    ``cov`` is the sender's full error-state covariance, IMU block included.
    """

    agent_id: int
    timestamp: float
    window: SlidingWindow
    features: list = field(default_factory=list)
    cov: np.ndarray = field(default_factory=lambda: np.zeros((IMU_DIM, IMU_DIM)))
    tracks: list = field(default_factory=list)

    @property
    def dim(self):
        return IMU_DIM + POSE_DIM * len(self.window) + FEATURE_DIM * len(self.features)

    def __post_init__(self):
        if self.cov.shape != (self.dim, self.dim):
            raise ValueError(f"snapshot covariance {self.cov.shape} does not match dimension {self.dim}")


def snapshot_from_state(x, tracks=(), min_views=2):
    """Freeze ``x`` and the tracks seen inside its window into a snapshot."""
    win = x.window
    n = len(win)
    window = SlidingWindow(
        win.capacity, win.positions.copy(), win.quats.copy(), list(range(n)), list(win.times)
    )
    shared = []
    for tr in tracks:
        obs = tr.in_window(win)
        if len(obs) < min_views:
            continue
        shared.append(
            Track(
                tr.track_id,
                [Observation(ob.u, ob.v, i, ob.t) for i, ob in obs],
                tr.descriptor,
                tr.kind,
                tr.alive,
                tr.landmark_id,
            )
        )
    feats = [
        InverseDepthFeature(f.alpha, f.beta, f.rho, f.anchor_index, f.feature_id, f.descriptor) for f in x.features
    ]
    return RemoteSnapshot(x.agent_id, x.time, window, feats, x.cov.copy(), shared)


# ---------------------------------------------------------------------------
# matching


@dataclass
class Match:
    local_index: int
    remote_index: int
    distance: int
    mode: str


def hamming_matrix(a, b):
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=int)
    return np.bitwise_count(a[:, None, :] ^ b[None, :, :]).sum(axis=2).astype(int)


def match_descriptors(local, remote, max_distance=40, ratio=0.8):
    """Mutual nearest neighbours under Hamming distance with a ratio test."""
    D = hamming_matrix(local, remote)
    if D.size == 0:
        return []
    out = []
    best_remote = np.argmin(D, axis=1)
    best_local = np.argmin(D, axis=0)
    for i, j in enumerate(best_remote):
        d = D[i, j]
        if d > max_distance or best_local[j] != i:
            continue
        if D.shape[1] > 1:
            second = np.partition(D[i], 1)[1]
            if d > ratio * second or (second == 0):
                continue
        out.append((i, int(j), int(d)))
    return out


def match_tracks(local, remote, mode="descriptor", max_distance=40, ratio=0.8):
    """One-to-one correspondences between local and remote tracks or features.

    ``descriptor`` mode compares the 256-bit descriptors; ``oracle-id`` pairs
    items with the same ground-truth landmark (tests and diagnostics only).
    """
    if mode == "oracle-id":
        index = {}
        for j, tr in enumerate(remote):
            if tr.landmark_id is not None:
                index.setdefault(tr.landmark_id, j)
        used = set()
        out = []
        for i, tr in enumerate(local):
            j = index.get(tr.landmark_id)
            if j is None or j in used:
                continue
            used.add(j)
            out.append(Match(i, j, 0, mode))
        return out
    if mode != "descriptor":
        raise ValueError(f"unknown match mode {mode!r}")
    if not local or not remote:
        return []
    a = np.array([tr.descriptor for tr in local])
    b = np.array([tr.descriptor for tr in remote])
    return [Match(i, j, d, mode) for i, j, d in match_descriptors(a, b, max_distance, ratio)]


# ---------------------------------------------------------------------------
# covariance intersection


def _golden_section(f, lo, hi, tol=1e-9):
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def ci_objective(terms, R=None, objective="trace"):
    terms = [np.atleast_2d(T) for T in terms]
    if objective == "trace":
        traces = np.array([np.trace(T) for T in terms])
        return lambda w: float(np.sum(traces / w))
    if objective == "max-eigenvalue":
        R0 = np.zeros_like(terms[0]) if R is None else np.atleast_2d(R)
        return lambda w: float(np.linalg.eigvalsh(R0 + sum(T / wi for T, wi in zip(terms, w)))[-1])
    raise ValueError(f"unknown CI objective {objective!r}")


def ci_weights(terms, R=None, objective="trace", omega_min=OMEGA_MIN, tol=1e-6):
    """Covariance-intersection weights minimizing ``S = R + sum_l T_l / w_l``.

    ``terms`` are the per-participant ``H_l P_l H_l^T`` blocks.  Weights lie on
    the simplex with each ``w_l`` in ``[omega_min, 1]``.
    """
    L = len(terms)
    if L == 0:
        raise ValueError("at least one participant is required")
    if L == 1:
        return np.ones(1)
    omega_min = min(omega_min, 1.0 / L)
    if L == 2 and objective == "trace":
        t0, t1 = float(np.trace(np.atleast_2d(terms[0]))), float(np.trace(np.atleast_2d(terms[1])))
        w0 = _golden_section(lambda w: t0 / w + t1 / (1.0 - w), omega_min, 1.0 - omega_min, tol * 1e-3)
        return np.array([w0, 1.0 - w0])
    f = ci_objective(terms, R, objective)
    if L == 2:
        g = lambda w: f(np.array([w, 1.0 - w]))  # noqa: E731
        w0 = _golden_section(g, omega_min, 1.0 - omega_min, tol * 1e-3)
        return np.array([w0, 1.0 - w0])
    w = np.full(L, 1.0 / L)
    for _ in range(200):
        w_old = w.copy()
        for i in range(L):
            for j in range(i + 1, L):
                s = w[i] + w[j]
                lo, hi = max(omega_min, s - 1.0), min(1.0, s - omega_min)
                if hi <= lo:
                    continue

                def pair(wi, i=i, j=j, s=s):
                    trial = w.copy()
                    trial[i], trial[j] = wi, s - wi
                    return f(trial)

                w[i] = _golden_section(pair, lo, hi, tol * 1e-3)
                w[j] = s - w[i]
        if np.max(np.abs(w - w_old)) < tol * 1e-2:
            break
    return w / w.sum()


def partially_scaled_prior(P, involved, omega):
    """Prior covariance with covariance-intersection inflation on ``involved``.

    The involved block is scaled by ``1/omega``; every other state receives
    only the inflation carried by its linear regression on the involved
    states, ``P + (1/omega - 1) P[:, J] P[J, J]^-1 P[J, :]``.  The result
    dominates ``P`` and equals ``P / omega`` when ``J`` covers the state.
    """
    n = P.shape[0]
    if involved is None or len(involved) == n:
        return P / omega
    J = np.asarray(involved, dtype=int)
    if len(J) == 0 or omega == 1.0:
        return P.copy()
    PJ = P[:, J]
    G = np.linalg.pinv(P[np.ix_(J, J)], rcond=1e-10, hermitian=True)
    return P + (1.0 / omega - 1.0) * (PJ @ G @ PJ.T)


def ci_update_matrices(P, H0, R_eff, omega0, involved=None):
    """Gain, posterior covariance and innovation covariance of a CI update.

    ``R_eff`` already holds the measurement noise plus the scaled remote
    terms.  Returns ``(K, P_new, S)`` or ``None`` if ``S`` is ill-conditioned.
    """
    P_s = partially_scaled_prior(P, involved, omega0)
    PHt = P_s @ H0.T
    S = H0 @ PHt + R_eff
    if np.linalg.cond(S) > MAX_CONDITION:
        return None
    K = np.linalg.solve(S, PHt.T).T
    IKH = np.eye(P.shape[0]) - K @ H0
    P_new = IKH @ P_s @ IKH.T + K @ R_eff @ K.T
    return K, P_new, S


def ci_ekf_update(local, remote_covs, H_blocks, residual, R, weights, involved=None, require_gain=False):
    """Covariance-intersection EKF update of the local state.

    ``H_blocks[0]`` is the local Jacobian (width ``local.dim``), ``H_blocks[l]``
    for ``l >= 1`` pairs with ``remote_covs[l-1]``.  ``involved`` lists the
    local error-state indices the update touches directly (``None`` means all
    of them); see :func:`partially_scaled_prior`.  The gain is
    ``K = (1/w_0) P H^T S^-1`` with ``S = R + sum_l H_l P_l H_l^T / w_l``.
    With ``require_gain`` the update is skipped unless it lowers the trace of
    the local covariance, so repeated fusion cannot inflate the filter.
    Returns ``(state, info)``.
    """
    H0 = np.atleast_2d(H_blocks[0])
    residual = np.atleast_1d(np.asarray(residual, dtype=float))
    weights = np.asarray(weights, dtype=float)
    R_eff = np.atleast_2d(R).astype(float)
    for Pl, Hl, wl in zip(remote_covs, H_blocks[1:], weights[1:]):
        Hl = np.atleast_2d(Hl)
        R_eff = R_eff + Hl @ Pl @ Hl.T / wl
    out = ci_update_matrices(local.cov, H0, R_eff, weights[0], None if involved is None else list(involved))
    if out is None:
        logger.debug("CI update aborted: ill-conditioned innovation covariance")
        return local, {"applied": False, "reason": "singular"}
    K, P_new, S = out
    if require_gain and np.trace(P_new) >= np.trace(local.cov):
        return local, {"applied": False, "reason": "no-gain"}
    dx = K @ residual
    y = apply_error_state(local, dx)
    y.cov = condition_covariance(P_new)
    return y, {"applied": True, "dx": dx, "S": S, "K": K}


def _involved_from_columns(H0, n_poses):
    """Window-pose blocks (and feature blocks) with nonzero Jacobian columns."""
    nz = np.flatnonzero(np.any(H0 != 0.0, axis=0))
    blocks = set()
    for c in nz:
        if c < IMU_DIM:
            blocks.add((c, 1))
        elif c < pose_offset(n_poses):
            i = (c - IMU_DIM) // POSE_DIM
            blocks.add((pose_offset(i), POSE_DIM))
        else:
            j = (c - pose_offset(n_poses)) // FEATURE_DIM
            blocks.add((feature_offset(n_poses, j), FEATURE_DIM))
    idx = []
    for o, n in sorted(blocks):
        idx.extend(range(o, o + n))
    return np.array(idx, dtype=int)


def _fuse(local, snapshot, rows, weight_objective="trace"):
    """Stack gated rows ``(r, H_local, H_remote, R)`` and run the CI update."""
    r = np.concatenate([row[0] for row in rows])
    H0 = np.vstack([row[1] for row in rows])
    H1 = np.vstack([row[2] for row in rows])
    R = np.zeros((len(r), len(r)))
    k = 0
    for row in rows:
        n = len(row[0])
        R[k : k + n, k : k + n] = row[3]
        k += n
    terms = [H0 @ local.cov @ H0.T, H1 @ snapshot.cov @ H1.T]
    w = ci_weights(terms, R, objective=weight_objective)
    involved = _involved_from_columns(H0, len(local.window))
    y, info = ci_ekf_update(local, [snapshot.cov], [H0, H1], r, R, w, involved, require_gain=True)
    info["weights"] = w
    return y, info


# ---------------------------------------------------------------------------
# collaborative MSCKF


def joint_track_system(local_obs, local_window, remote_obs, remote_window, p_w):
    """Landmark-free joint residual of one landmark seen by two agents.

    Each agent's stacked system is first split with the orthonormal basis of
    its landmark Jacobian; the landmark-dependent ("range") rows of both
    agents are stacked and projected onto the left nullspace of the stacked
    landmark Jacobian.  Returns ``(r, H_local_w, H_remote_w, sensitivity)``
    with Jacobians over the two windows, or ``None`` if degenerate.
    ``sensitivity`` is the projected landmark Jacobian (ideally zero).
    """
    r0, Hx0, Hp0, d0 = track_system(local_obs, local_window, p_w)
    r1, Hx1, Hp1, d1 = track_system(remote_obs, remote_window, p_w)
    if np.any(d0 <= 0) or np.any(d1 <= 0):
        return None
    Q0, _, k0 = range_null_split(Hp0)
    Q1, _, k1 = range_null_split(Hp1)
    Hp_joint = np.vstack([Q0.T @ Hp0, Q1.T @ Hp1])
    _, B, rank = range_null_split(Hp_joint)
    if rank < 3 or B.shape[1] == 0:
        return None
    B0, B1 = B[:k0], B[k0:]
    r = B0.T @ (Q0.T @ r0) + B1.T @ (Q1.T @ r1)
    H_loc = B0.T @ (Q0.T @ Hx0)
    H_rem = B1.T @ (Q1.T @ Hx1)
    sensitivity = B.T @ Hp_joint
    return r, H_loc, H_rem, sensitivity


def _window_embed(dim, n_poses, H_w):
    H = np.zeros((H_w.shape[0], dim))
    H[:, IMU_DIM : IMU_DIM + POSE_DIM * n_poses] = H_w
    return H


def collab_msckf_update(local, snapshot, pairs, noise, triangulation=None, weight_objective="trace"):
    """Collaborative MSCKF update from ``(local_track, remote_track)`` pairs.

    Only the local state is written.  Returns ``(state, info)``.
    """
    info = {"accepted": 0, "gated": 0, "triangulation_failed": 0, "degenerate": 0, "self_match": 0}
    if snapshot.agent_id == local.agent_id:
        info["self_match"] = len(pairs)
        return local, info
    triangulation = triangulation or {}
    sigma2 = noise.sigma_v**2
    lw, rw = local.window, snapshot.window
    cols = slice(IMU_DIM, IMU_DIM + POSE_DIM * len(lw))
    rcols = slice(IMU_DIM, IMU_DIM + POSE_DIM * len(rw))
    P0 = local.cov[cols, cols]
    P1 = snapshot.cov[rcols, rcols]
    rows = []
    for ltr, rtr in pairs:
        lobs = ltr.in_window(lw)
        robs = rtr.in_window(rw)
        if not lobs or not robs:
            info["triangulation_failed"] += 1
            continue
        li = [i for i, _ in lobs]
        ri = [i for i, _ in robs]
        uv = np.array([[ob.u, ob.v] for _, ob in lobs] + [[ob.u, ob.v] for _, ob in robs])
        pos = np.vstack([lw.positions[li], rw.positions[ri]])
        rots = [lw.rotation(i) for i in li] + [rw.rotation(i) for i in ri]
        tri = triangulate(uv, pos, rots, **triangulation)
        if not tri.ok:
            info["triangulation_failed"] += 1
            continue
        sys = joint_track_system(lobs, lw, robs, rw, tri.point)
        if sys is None:
            info["degenerate"] += 1
            continue
        r, H_loc, H_rem, _ = sys
        S_true = H_loc @ P0 @ H_loc.T + H_rem @ P1 @ H_rem.T + sigma2 * np.eye(len(r))
        if not gate_chi2(r, S_true):
            info["gated"] += 1
            continue
        rows.append(
            (
                r,
                _window_embed(local.dim, len(lw), H_loc),
                _window_embed(snapshot.dim, len(rw), H_rem),
                sigma2 * np.eye(len(r)),
            )
        )
        info["accepted"] += 1
    if not rows:
        return local, info
    y, ci = _fuse(local, snapshot, rows, weight_objective)
    if not ci["applied"]:
        info["aborted"] = 1
        return local, info
    info["weights"] = ci["weights"].tolist()
    return y, info


# ---------------------------------------------------------------------------
# SLAM-SLAM


def feature_world_point(window, feature, dim, n_poses, j):
    """World point of an inverse-depth feature and its Jacobian (3 x dim)."""
    a = feature.anchor_index
    R_a = window.rotation(a).T
    m = np.array([feature.alpha, feature.beta, 1.0])
    g = window.positions[a] + R_a @ m / feature.rho
    J = np.zeros((3, dim))
    oa = pose_offset(a)
    J[:, oa : oa + 3] = np.eye(3)
    J[:, oa + 3 : oa + 6] = -R_a @ skew(m / feature.rho)
    of = feature_offset(n_poses, j)
    J[:, of : of + 3] = R_a @ np.column_stack(
        [[1 / feature.rho, 0, 0], [0, 1 / feature.rho, 0], -m / feature.rho**2]
    )
    return g, J


def slam_slam_update(local, snapshot, feature_pairs, sigma_c=SIGMA_CONSTRAINT, weight_objective="trace"):
    """Zero-difference constraint between matched SLAM features of two agents.

    ``feature_pairs`` holds ``(local_feature_id, remote_feature_index)``.
    Returns ``(state, info)``; ``info["residuals"]`` lists the constraint
    values ``g_local - g_remote`` before the update.
    """
    info = {"accepted": 0, "gated": 0, "self_match": 0, "residuals": []}
    if snapshot.agent_id == local.agent_id:
        info["self_match"] = len(feature_pairs)
        return local, info
    rows = []
    for fid, k in feature_pairs:
        j = local.feature_index(fid)
        if j is None or not 0 <= k < len(snapshot.features):
            continue
        fl, fr = local.features[j], snapshot.features[k]
        if fl.rho <= 0 or fr.rho <= 0:
            continue
        g0, J0 = feature_world_point(local.window, fl, local.dim, len(local.window), j)
        g1, J1 = feature_world_point(snapshot.window, fr, snapshot.dim, len(snapshot.window), k)
        c = g0 - g1
        info["residuals"].append(c)
        R = sigma_c**2 * np.eye(3)
        S_true = J0 @ local.cov @ J0.T + J1 @ snapshot.cov @ J1.T + R
        if not gate_chi2(c, S_true):
            info["gated"] += 1
            continue
        # constraint is g0 - g1 = 0; innovation = 0 - c, with H1 = -J1
        rows.append((-c, J0, -J1, R))
        info["accepted"] += 1
    if not rows:
        return local, info
    y, ci = _fuse(local, snapshot, rows, weight_objective)
    if not ci["applied"]:
        info["aborted"] = 1
        return local, info
    info["weights"] = ci["weights"].tolist()
    return y, info


__all__ = [
    "RemoteSnapshot",
    "snapshot_from_state",
    "Match",
    "hamming_matrix",
    "match_tracks",
    "ci_weights",
    "ci_ekf_update",
    "ci_update_matrices",
    "partially_scaled_prior",
    "gate_chi2",
    "joint_track_system",
    "collab_msckf_update",
    "feature_world_point",
    "slam_slam_update",
]
