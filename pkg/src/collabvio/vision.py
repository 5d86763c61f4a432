"""Single-agent visual updates: projection, triangulation, MSCKF and SLAM features."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .kalman import compress_rows, ekf_update, gate_chi2
from .state import (
    FEATURE_DIM,
    POSE_DIM,
    InverseDepthFeature,
    delete_block,
    feature_offset,
    pose_offset,
    quat_to_rotation,
    skew,
)

logger = logging.getLogger(__name__)

Z_MIN = 1e-3
OPPORTUNISTIC, MSCKF, SLAM = "opportunistic", "msckf", "slam"


@dataclass
class Observation:
    """Normalized image-plane measurement.

    ``frame`` is the agent's frame counter; it resolves to a window pose index
    through ``SlidingWindow.frame_ids``.
    """

    u: float
    v: float
    frame: int
    t: float = 0.0


@dataclass
class Track:
    track_id: int
    observations: list = field(default_factory=list)
    descriptor: np.ndarray | None = None
    kind: str = OPPORTUNISTIC
    alive: bool = True
    landmark_id: int | None = None  # ground truth, only read in oracle matching

    def __len__(self):
        return len(self.observations)

    def in_window(self, window):
        """Observations paired with their window index, oldest first."""
        ids = window.frame_ids
        if not ids:
            return []
        first, n = ids[0], len(ids)
        if ids[-1] - first == n - 1:
            # contiguous frame ids (the live window): index by offset
            return [(ob.frame - first, ob) for ob in self.observations if 0 <= ob.frame - first < n]
        out = []
        for ob in self.observations:
            i = window.index_of_frame(ob.frame)
            if i is not None:
                out.append((i, ob))
        return out


@dataclass
class MeasurementNoise:
    sigma_v: float

    def __post_init__(self):
        if not self.sigma_v > 0:
            raise ValueError("sigma_v must be positive")


@dataclass
class TriangulationResult:
    status: str  # "ok" | "degenerate" | "failed"
    point: np.ndarray | None = None
    rms: float = np.inf
    iterations: int = 0
    converged: bool = False

    @property
    def ok(self):
        return self.status == "ok"


# ---------------------------------------------------------------------------
# measurement model


def project(p_cam, q_cam, p_w, z_min=Z_MIN):
    """Normalized projection of a world point; ``None`` when behind the camera."""
    p_c = quat_to_rotation(q_cam) @ (np.asarray(p_w, float) - np.asarray(p_cam, float))
    if p_c[2] <= z_min:
        return None
    return p_c[:2] / p_c[2]


def projection_jacobian(p_c):
    x, y, z = p_c
    return np.array([[1 / z, 0.0, -x / z**2], [0.0, 1 / z, -y / z**2]])


def point_jacobians(p_w, positions, rotations):
    """Predicted measurements and Jacobians of a world point seen from poses.

    Returns ``(pred (n,2), H_pose (n,2,6), H_point (n,2,3), depth (n,))`` where
    ``H_pose`` is with respect to ``(dp, dtheta)`` of each camera.
    """
    C = np.asarray(rotations, dtype=float)
    n = len(C)
    d = np.asarray(p_w, float) - np.asarray(positions, float)
    p_c = np.matmul(C, d[:, :, None])[:, :, 0]
    x, y, z = p_c[:, 0], p_c[:, 1], p_c[:, 2]
    inv_z = 1.0 / z
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = inv_z
    J[:, 1, 1] = inv_z
    J[:, 0, 2] = -x * inv_z**2
    J[:, 1, 2] = -y * inv_z**2
    S = np.zeros((n, 3, 3))
    S[:, 0, 1], S[:, 0, 2], S[:, 1, 2] = -z, y, -x
    S[:, 1, 0], S[:, 2, 0], S[:, 2, 1] = z, -y, x
    H_point = np.matmul(J, C)
    H_pose = np.empty((n, 2, POSE_DIM))
    H_pose[:, :, 0:3] = -H_point
    H_pose[:, :, 3:6] = np.matmul(J, S)
    pred = p_c[:, :2] * inv_z[:, None]
    return pred, H_pose, H_point, z.copy()


# ---------------------------------------------------------------------------
# triangulation


def _two_view_init(bearings, centers):
    """Midpoint of the closest approach of the first and the farthest ray."""
    d = centers - centers[0]
    far = int(np.argmax(np.einsum("ij,ij->i", d, d)))
    b0, b1 = bearings[0], bearings[far]
    # normal equations of [b0, -b1] s = c_far - c0
    a, b, c = b0 @ b0, -(b0 @ b1), b1 @ b1
    rhs = d[far]
    g0, g1 = b0 @ rhs, -(b1 @ rhs)
    det = a * c - b * b
    if det <= 1e-12 * a * c:
        return centers[0] + b0 * max(np.sqrt(rhs @ rhs), 1.0), far
    s0 = (c * g0 - b * g1) / det
    s1 = (a * g1 - b * g0) / det
    return 0.5 * (centers[0] + s0 * b0 + centers[far] + s1 * b1), far


def triangulate(uv, positions, rotations, baseline_min=1e-3, max_iters=10, rms_gate=1e-2, min_parallax=1e-4):
    """Gauss-Newton triangulation in inverse depth anchored at the first view.

    ``rotations`` are the world-to-camera matrices ``C(q_w_c)``.
    """
    uv = np.asarray(uv, dtype=float)
    centers = np.asarray(positions, dtype=float)
    n = len(uv)
    if n < 2:
        return TriangulationResult("degenerate")
    d = centers - centers[0]
    if np.sqrt(np.max(np.einsum("ij,ij->i", d, d))) <= baseline_min:
        return TriangulationResult("degenerate")
    C = np.asarray(rotations, dtype=float)
    Rwc = np.transpose(C, (0, 2, 1))
    uv1 = np.empty((n, 3))
    uv1[:, :2] = uv
    uv1[:, 2] = 1.0
    bearings = np.matmul(Rwc, uv1[:, :, None])[:, :, 0]
    bearings /= np.sqrt(np.einsum("ij,ij->i", bearings, bearings))[:, None]
    cr = np.cross(bearings[0], bearings)
    if np.sqrt(np.max(np.einsum("ij,ij->i", cr, cr))) < min_parallax:
        return TriangulationResult("degenerate")

    p_init, _ = _two_view_init(bearings, centers)
    p_a = C[0] @ (p_init - centers[0])
    if p_a[2] <= Z_MIN:
        p_a = uv1[0] * max(np.linalg.norm(p_init - centers[0]), 1.0)
    theta = np.array([p_a[0] / p_a[2], p_a[1] / p_a[2], 1.0 / p_a[2]])

    # h_i = C_i R_a [a, b, 1] + rho C_i (c_a - c_i), linear in (a, b, 1, rho)
    M = np.empty((n, 3, 4))
    M[:, :, 0:3] = np.matmul(C, Rwc[0])
    M[:, :, 3] = np.matmul(C, -d[:, :, None])[:, :, 0]

    def residual(th):
        h = M @ np.array([th[0], th[1], 1.0, th[2]])
        return uv - h[:, :2] / h[:, 2:3], h

    r, h = residual(theta)
    converged = False
    it = 0
    dh = M[:, :, [0, 1, 3]]  # (n,3,3)
    for it in range(1, max_iters + 1):
        if np.any(h[:, 2] <= 0):
            break
        inv_z = 1.0 / h[:, 2]
        J = (dh[:, 0:2, :] - (h[:, 0:2] * inv_z[:, None])[:, :, None] * dh[:, 2:3, :]) * inv_z[:, None, None]
        Jm = J.reshape(-1, 3)
        try:
            step = np.linalg.solve(Jm.T @ Jm, Jm.T @ r.ravel())
        except np.linalg.LinAlgError:
            break
        theta = theta + step
        r, h = residual(theta)
        if step @ step <= (1e-10 * (1.0 + np.sqrt(theta @ theta))) ** 2:
            converged = True
            break
    if not converged or theta[2] <= 0 or np.any(h[:, 2] <= 0):
        return TriangulationResult("failed", iterations=it)
    point = centers[0] + Rwc[0] @ np.array([theta[0], theta[1], 1.0]) / theta[2]
    rms = float(np.sqrt(np.mean(r**2)))
    if rms > rms_gate:
        return TriangulationResult("failed", point, rms, it, True)
    return TriangulationResult("ok", point, rms, it, True)


# ---------------------------------------------------------------------------
# nullspace helpers


def range_null_split(H_p, tol=1e-10):
    """Orthonormal bases of the column range and left nullspace of ``H_p``."""
    Q, R = np.linalg.qr(H_p, mode="complete")
    k = min(H_p.shape)
    diag = np.abs(np.diag(R[:k, :k]))
    rank = int(np.sum(diag > tol * max(diag.max(), 1.0)))
    return Q[:, :rank], Q[:, rank:], rank


def track_system(track_obs, window, p_w, rotations=None):
    """Stacked residual and Jacobians of one track against window poses.

    ``H_x`` spans the window block only (``6 * len(window)`` columns).
    """
    idx = [i for i, _ in track_obs]
    z = np.array([[ob.u, ob.v] for _, ob in track_obs])
    rots = window.rotations()[idx] if rotations is None else rotations[idx]
    pred, H_pose, H_point, depth = point_jacobians(p_w, window.positions[idx], rots)
    n = len(idx)
    H_x = np.zeros((2 * n, POSE_DIM * len(window)))
    for k, i in enumerate(idx):
        H_x[2 * k : 2 * k + 2, POSE_DIM * i : POSE_DIM * i + POSE_DIM] = H_pose[k]
    return (z - pred).ravel(), H_x, H_point.reshape(2 * n, 3), depth


def track_baseline(track_obs, window):
    pos = window.positions[[i for i, _ in track_obs]]
    if len(pos) < 2:
        return 0.0
    return float(np.max(np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=2)))


def _window_columns(x):
    o = pose_offset(0)
    return slice(o, o + POSE_DIM * len(x.window))


def _embed(x, H_w):
    H = np.zeros((H_w.shape[0], x.dim))
    H[:, _window_columns(x)] = H_w
    return H


# ---------------------------------------------------------------------------
# MSCKF


def msckf_update(x, tracks, noise, triangulation=None):
    """Nullspace-projected MSCKF update with the given completed tracks.

    Returns ``(state, info)``; ``info`` counts accepted, gated and skipped tracks.
    """
    triangulation = triangulation or {}
    info = {"accepted": 0, "gated": 0, "triangulation_failed": 0, "rank_deficient": 0}
    win = x.window
    cols = _window_columns(x)
    P_ww = x.cov[cols, cols]
    sigma2 = noise.sigma_v**2
    rots = win.rotations()
    rs, Hs = [], []
    for tr in tracks:
        obs = tr.in_window(win)
        if len(obs) < 2:
            info["triangulation_failed"] += 1
            continue
        uv = np.array([[ob.u, ob.v] for _, ob in obs])
        idx = [i for i, _ in obs]
        tri = triangulate(uv, win.positions[idx], rots[idx], **triangulation)
        if not tri.ok:
            info["triangulation_failed"] += 1
            continue
        r, H_x, H_p, _ = track_system(obs, win, tri.point, rots)
        _, A, rank = range_null_split(H_p)
        if rank < 3 or A.shape[1] == 0:
            info["rank_deficient"] += 1
            logger.debug("track %s: rank-deficient landmark Jacobian", tr.track_id)
            continue
        r_o = A.T @ r
        H_o = A.T @ H_x
        S = H_o @ P_ww @ H_o.T + sigma2 * np.eye(len(r_o))
        if not gate_chi2(r_o, S):
            info["gated"] += 1
            continue
        rs.append(r_o)
        Hs.append(H_o)
        info["accepted"] += 1
    if not rs:
        return x, info
    H_w = np.vstack(Hs)
    r = np.concatenate(rs)
    H_w, r = compress_rows(H_w, r)
    y, _ = ekf_update(x, _embed(x, H_w), r, sigma2 * np.eye(len(r)))
    return y, info


# ---------------------------------------------------------------------------
# SLAM features


def feature_measurement(x, j, i):
    """Prediction and Jacobian (full width) of feature ``j`` seen from pose ``i``."""
    f = x.features[j]
    win = x.window
    a = f.anchor_index
    R_a = win.rotation(a).T
    C_i = win.rotation(i)
    m = np.array([f.alpha, f.beta, 1.0])
    if i == a:
        # from the anchor the prediction is (alpha, beta) by construction
        p_c = m / f.rho
    else:
        p_w = win.positions[a] + R_a @ m / f.rho
        p_c = C_i @ (p_w - win.positions[i])
    J = projection_jacobian(p_c)
    H = np.zeros((2, x.dim))
    oi, oa = pose_offset(i), pose_offset(a)
    of = feature_offset(len(win), j)
    H[:, oi : oi + 3] += J @ (-C_i)
    H[:, oi + 3 : oi + 6] += J @ skew(p_c)
    H[:, oa : oa + 3] += J @ C_i
    H[:, oa + 3 : oa + 6] += J @ (-C_i @ R_a @ skew(m / f.rho))
    dfeat = np.column_stack([[1 / f.rho, 0, 0], [0, 1 / f.rho, 0], -m / f.rho**2])
    H[:, of : of + 3] = J @ C_i @ R_a @ dfeat
    pred = m[:2].copy() if i == a else p_c[:2] / p_c[2]
    return pred, H, p_c[2]


def slam_update(x, measurements, noise):
    """EKF update for SLAM features; ``measurements`` is a list of
    ``(feature_id, window_index, (u, v))``.  Features whose inverse depth
    turns non-positive are dropped."""
    info = {"accepted": 0, "gated": 0, "dropped": 0}
    sigma2 = noise.sigma_v**2
    rs, Hs = [], []
    for fid, i, z in measurements:
        j = x.feature_index(fid)
        if j is None:
            continue
        pred, H, depth = feature_measurement(x, j, i)
        if depth <= Z_MIN:
            info["gated"] += 1
            continue
        rs.append(np.asarray(z, float) - pred)
        Hs.append(H)
    if rs:
        H = np.vstack(Hs)
        r = np.concatenate(rs)
        S = H @ x.cov @ H.T
        keep = []
        for k in range(len(rs)):
            Sk = S[2 * k : 2 * k + 2, 2 * k : 2 * k + 2] + sigma2 * np.eye(2)
            if gate_chi2(rs[k], Sk):
                keep += [2 * k, 2 * k + 1]
            else:
                info["gated"] += 1
        info["accepted"] = len(keep) // 2
        if keep:
            x, _ = ekf_update(x, H[keep], r[keep], sigma2 * np.eye(len(keep)))
    bad = [f.feature_id for f in x.features if f.rho <= 0]
    for fid in bad:
        x = remove_feature(x, fid)
        info["dropped"] += 1
    return x, info


def remove_feature(x, feature_id):
    j = x.feature_index(feature_id)
    if j is None:
        return x
    y = x.copy()
    y.cov = delete_block(y.cov, feature_offset(len(y.window), j), FEATURE_DIM)
    del y.features[j]
    return y


def add_feature(x, track, noise, rho0, rho_var=1.0):
    """Append an inverse-depth feature anchored at the track's oldest window view."""
    obs = track.in_window(x.window)
    a, ob = obs[0]
    y = x.copy()
    y.features.append(InverseDepthFeature(ob.u, ob.v, rho0, a, track.track_id, track.descriptor))
    n = y.cov.shape[0]
    P = np.zeros((n + FEATURE_DIM, n + FEATURE_DIM))
    P[:n, :n] = y.cov
    P[n:, n:] = np.diag([noise.sigma_v**2, noise.sigma_v**2, rho_var])
    y.cov = P
    return y


def slam_init_and_update(x, tracks, noise, max_features, current_frame=None, rho_var=1.0, triangulation=None):
    """Update existing SLAM features with their current-frame observations and
    promote candidate tracks into free feature slots.

    ``tracks`` holds SLAM-kind tracks (existing features) and promotion
    candidates (kind ``opportunistic``), the latter ordered by preference.
    Returns ``(state, info, promoted_track_ids)``.
    """
    triangulation = triangulation or {}
    win = x.window
    meas = []
    for tr in tracks:
        if tr.kind != SLAM or x.feature_index(tr.track_id) is None:
            continue
        ob = tr.observations[-1]
        if current_frame is not None and ob.frame != current_frame:
            continue
        i = win.index_of_frame(ob.frame)
        if i is not None:
            meas.append((tr.track_id, i, (ob.u, ob.v)))
    x, info = slam_update(x, meas, noise)
    info.update(promoted=0, rejected_no_slot=0)
    promoted = []
    for tr in tracks:
        if tr.kind == SLAM:
            continue
        if len(x.features) >= max_features:
            info["rejected_no_slot"] += 1
            continue
        obs = tr.in_window(x.window)
        if len(obs) < 2:
            continue
        idx = [i for i, _ in obs]
        uv = np.array([[ob.u, ob.v] for _, ob in obs])
        tri = triangulate(uv, x.window.positions[idx], [x.window.rotation(i) for i in idx], **triangulation)
        if not tri.ok:
            continue
        a = idx[0]
        depth = (x.window.rotation(a) @ (tri.point - x.window.positions[a]))[2]
        if depth <= Z_MIN:
            continue
        y = add_feature(x, tr, noise, 1.0 / depth, rho_var)
        rest = [(tr.track_id, i, (ob.u, ob.v)) for i, ob in obs[1:]]
        y, _ = slam_update(y, rest, noise)
        if y.feature_index(tr.track_id) is None:
            continue
        x = y
        promoted.append(tr.track_id)
        info["promoted"] += 1
    return x, info, promoted


# ---------------------------------------------------------------------------
# track taxonomy


def classify_tracks(tracks, window, slam_ids=(), baseline_min=0.1):
    """Assign kinds: bound to a feature slot -> slam; finished (lost or spanning
    the whole window) with 2..M views and enough baseline -> msckf; else
    opportunistic.  Returns new Track objects."""
    slam_ids = set(slam_ids)
    out = []
    for tr in tracks:
        if tr.track_id in slam_ids:
            kind = SLAM
        else:
            obs = tr.in_window(window)
            finished = (not tr.alive) or len(obs) >= window.capacity
            if finished and 2 <= len(obs) <= window.capacity and track_baseline(obs, window) > baseline_min:
                kind = MSCKF
            else:
                kind = OPPORTUNISTIC
        out.append(Track(tr.track_id, tr.observations, tr.descriptor, kind, tr.alive, tr.landmark_id))
    return out


__all__ = [
    "Observation",
    "Track",
    "MeasurementNoise",
    "TriangulationResult",
    "project",
    "point_jacobians",
    "triangulate",
    "range_null_split",
    "track_system",
    "msckf_update",
    "feature_measurement",
    "slam_update",
    "slam_init_and_update",
    "remove_feature",
    "classify_tracks",
]
