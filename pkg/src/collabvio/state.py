"""Filter state, error-state layout and quaternion algebra.

Quaternions are Hamilton, stored ``(w, x, y, z)``.  A quaternion ``q_a_b``
describes frame ``b`` with respect to frame ``a`` and its rotation matrix
``C(q_a_b)`` maps coordinates expressed in ``a`` into ``b``::

    x_b = C(q_a_b) @ x_a

so ``C(q)`` is the transpose of the usual active rotation of ``q``.

Orientation errors are local: ``q = q_hat (x) dq`` with ``dq = Exp(dtheta)``.

The error state is ordered IMU (15) | window (6 per pose) | features (3 each)::

    imu:     dp(0:3)  dv(3:6)  dtheta(6:9)  dbg(9:12)  dba(12:15)
    pose i:  dp, dtheta
    feat j:  dalpha, dbeta, drho
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

IMU_DIM = 15
POSE_DIM = 6
FEATURE_DIM = 3

_IMU_BLOCKS = {
    "imu-p": (0, 3),
    "imu-v": (3, 3),
    "imu-theta": (6, 3),
    "bg": (9, 3),
    "ba": (12, 3),
}


class CovarianceError(ValueError):
    """Raised when a covariance is not symmetric positive semi-definite."""


# ---------------------------------------------------------------------------
# quaternion algebra


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def quat_mul(p, q):
    pw, px, py, pz = p
    qw, qx, qy, qz = q
    return np.array(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ]
    )


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    # canonical hemisphere keeps boxminus continuous
    return q if q[0] >= 0.0 else -q


def quat_exp(theta):
    """Unit quaternion of the rotation vector ``theta``."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta)
    if angle < 1e-12:
        q = np.array([1.0, 0.5 * theta[0], 0.5 * theta[1], 0.5 * theta[2]])
        return q / np.linalg.norm(q)
    axis = theta / angle
    return np.concatenate(([np.cos(0.5 * angle)], np.sin(0.5 * angle) * axis))


def quat_log(q):
    """Rotation vector of a unit quaternion (inverse of ``quat_exp``)."""
    q = quat_normalize(q)
    vec = q[1:]
    s = np.linalg.norm(vec)
    if s < 1e-12:
        return 2.0 * vec
    return 2.0 * np.arctan2(s, q[0]) * vec / s


def quat_to_rotation(q, tol=1e-6):
    """Return ``C(q)`` with ``x_b = C(q_a_b) x_a``.

    Raises ``ValueError`` if ``q`` is not unit norm within ``tol``.
    """
    w, x, y, z = (float(c) for c in q)
    n = math.sqrt(w * w + x * x + y * y + z * z)
    if abs(n - 1.0) > tol:
        raise ValueError(f"quaternion norm {n:.3e} is not unit")
    w, x, y, z = w / n, x / n, y / n, z / n
    # transpose of the active rotation R(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y + w * z), 2 * (x * z - w * y)],
            [2 * (x * y - w * z), 1 - 2 * (x * x + z * z), 2 * (y * z + w * x)],
            [2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quats_to_rotations(Q):
    """Vectorized :func:`quat_to_rotation` over an ``(n, 4)`` array."""
    Q = np.asarray(Q, dtype=float).reshape(-1, 4)
    Q = Q / np.linalg.norm(Q, axis=1, keepdims=True)
    w, x, y, z = Q.T
    C = np.empty((len(Q), 3, 3))
    C[:, 0, 0] = 1 - 2 * (y * y + z * z)
    C[:, 0, 1] = 2 * (x * y + w * z)
    C[:, 0, 2] = 2 * (x * z - w * y)
    C[:, 1, 0] = 2 * (x * y - w * z)
    C[:, 1, 1] = 1 - 2 * (x * x + z * z)
    C[:, 1, 2] = 2 * (y * z + w * x)
    C[:, 2, 0] = 2 * (x * z + w * y)
    C[:, 2, 1] = 2 * (y * z - w * x)
    C[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return C


def rotation_to_quat(C):
    """Inverse of :func:`quat_to_rotation`."""
    R = np.asarray(C, dtype=float).T
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def rotation_angle_between(q1, q2):
    return np.linalg.norm(quat_log(quat_mul(quat_conj(q1), q2)))


# ---------------------------------------------------------------------------
# covariance hygiene


def symmetrize(P):
    return 0.5 * (P + P.T)


def condition_covariance(P, tol=1e-8):
    """Symmetrize ``P`` and check positive semi-definiteness.

    A Cholesky factorization of ``P + tol I`` certifies that the smallest
    eigenvalue exceeds ``-tol``; such tiny negative eigenvalues are left in
    place.  Anything more negative raises :class:`CovarianceError`.
    """
    P = symmetrize(P)
    try:
        np.linalg.cholesky(P + tol * np.eye(P.shape[0]))
        return P
    except np.linalg.LinAlgError:
        pass
    w = np.linalg.eigvalsh(P)
    raise CovarianceError(f"covariance has eigenvalue {w[0]:.3e}")


# ---------------------------------------------------------------------------
# state types


@dataclass
class ImuState:
    p_w_i: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v_w_i: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q_w_i: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    b_g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def vector(self):
        return np.concatenate([self.p_w_i, self.v_w_i, self.q_w_i, self.b_g, self.b_a])

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (16,):
            raise ValueError("IMU state vector must have 16 entries")
        return cls(x[0:3].copy(), x[3:6].copy(), quat_normalize(x[6:10]), x[10:13].copy(), x[13:16].copy())


@dataclass
class SlidingWindow:
    """Camera poses of the last ``capacity`` frames, oldest first."""

    capacity: int
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    quats: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    frame_ids: list = field(default_factory=list)
    times: list = field(default_factory=list)

    def __len__(self):
        return len(self.frame_ids)

    def vector(self):
        """Positions of all poses followed by all quaternions (7 per pose)."""
        return np.concatenate([self.positions.ravel(), self.quats.ravel()])

    def index_of_frame(self, frame_id):
        try:
            return self.frame_ids.index(frame_id)
        except ValueError:
            return None

    def rotation(self, i):
        return quat_to_rotation(self.quats[i])

    def rotations(self):
        """World-to-camera matrices of all poses, shape ``(n, 3, 3)``."""
        return quats_to_rotations(self.quats)


@dataclass
class InverseDepthFeature:
    alpha: float
    beta: float
    rho: float
    anchor_index: int
    feature_id: int
    descriptor: np.ndarray | None = None

    def world_point(self, window):
        m = np.array([self.alpha, self.beta, 1.0]) / self.rho
        return window.positions[self.anchor_index] + window.rotation(self.anchor_index).T @ m


@dataclass
class AgentState:
    imu: ImuState
    window: SlidingWindow
    features: list
    cov: np.ndarray
    agent_id: int = 0
    time: float = 0.0

    @property
    def dim(self):
        return IMU_DIM + POSE_DIM * len(self.window) + FEATURE_DIM * len(self.features)

    def copy(self):
        """Independent copy; descriptors are shared since they are never mutated."""
        imu = self.imu
        w = self.window
        return AgentState(
            ImuState(imu.p_w_i.copy(), imu.v_w_i.copy(), imu.q_w_i.copy(), imu.b_g.copy(), imu.b_a.copy()),
            SlidingWindow(w.capacity, w.positions.copy(), w.quats.copy(), list(w.frame_ids), list(w.times)),
            [replace(f) for f in self.features],
            self.cov.copy(),
            self.agent_id,
            self.time,
        )

    def feature_index(self, feature_id):
        for j, f in enumerate(self.features):
            if f.feature_id == feature_id:
                return j
        return None


def initial_state(imu, cov_imu, window_size, agent_id=0, time=0.0):
    cov_imu = np.asarray(cov_imu, dtype=float)
    if cov_imu.shape != (IMU_DIM, IMU_DIM):
        raise ValueError("initial IMU covariance must be 15x15")
    return AgentState(imu, SlidingWindow(window_size), [], cov_imu.copy(), agent_id, time)


# ---------------------------------------------------------------------------
# layout and error-state arithmetic


def pose_offset(i):
    return IMU_DIM + POSE_DIM * i


def feature_offset(n_poses, j):
    return IMU_DIM + POSE_DIM * n_poses + FEATURE_DIM * j


def state_block_index(x, kind, i=None):
    """Return ``(offset, length)`` of a block of the error state of ``x``."""
    if kind in _IMU_BLOCKS:
        return _IMU_BLOCKS[kind]
    if kind == "window-pose":
        if i is None or not 0 <= i < len(x.window):
            raise ValueError(f"window pose index {i} out of range")
        return pose_offset(i), POSE_DIM
    if kind == "feature":
        if i is None or not 0 <= i < len(x.features):
            raise ValueError(f"feature index {i} out of range")
        return feature_offset(len(x.window), i), FEATURE_DIM
    raise ValueError(f"unknown state block {kind!r}")


def apply_error_state(x, dx):
    """Return ``x [+] dx``: additive for vectors, local multiplicative for rotations."""
    dx = np.asarray(dx, dtype=float)
    if dx.shape != (x.dim,):
        raise ValueError(f"error vector has shape {dx.shape}, expected ({x.dim},)")
    y = x.copy()
    imu = y.imu
    imu.p_w_i = imu.p_w_i + dx[0:3]
    imu.v_w_i = imu.v_w_i + dx[3:6]
    imu.q_w_i = quat_normalize(quat_mul(imu.q_w_i, quat_exp(dx[6:9])))
    imu.b_g = imu.b_g + dx[9:12]
    imu.b_a = imu.b_a + dx[12:15]
    win = y.window
    for i in range(len(win)):
        o = pose_offset(i)
        win.positions[i] = win.positions[i] + dx[o : o + 3]
        win.quats[i] = quat_normalize(quat_mul(win.quats[i], quat_exp(dx[o + 3 : o + 6])))
    n = len(win)
    for j, f in enumerate(y.features):
        o = feature_offset(n, j)
        f.alpha += dx[o]
        f.beta += dx[o + 1]
        f.rho += dx[o + 2]
    return y


def boxminus(x, x_ref):
    """Error vector ``dx`` such that ``apply_error_state(x_ref, dx) == x``."""
    if len(x.window) != len(x_ref.window) or len(x.features) != len(x_ref.features):
        raise ValueError("states have different layouts")
    dx = np.zeros(x_ref.dim)

    def rot_err(qa, qb):
        return quat_log(quat_mul(quat_conj(qb), qa))

    dx[0:3] = x.imu.p_w_i - x_ref.imu.p_w_i
    dx[3:6] = x.imu.v_w_i - x_ref.imu.v_w_i
    dx[6:9] = rot_err(x.imu.q_w_i, x_ref.imu.q_w_i)
    dx[9:12] = x.imu.b_g - x_ref.imu.b_g
    dx[12:15] = x.imu.b_a - x_ref.imu.b_a
    for i in range(len(x.window)):
        o = pose_offset(i)
        dx[o : o + 3] = x.window.positions[i] - x_ref.window.positions[i]
        dx[o + 3 : o + 6] = rot_err(x.window.quats[i], x_ref.window.quats[i])
    n = len(x.window)
    for j, (f, g) in enumerate(zip(x.features, x_ref.features)):
        o = feature_offset(n, j)
        dx[o : o + 3] = [f.alpha - g.alpha, f.beta - g.beta, f.rho - g.rho]
    return dx


def delete_block(P, offset, length):
    keep = np.r_[0:offset, offset + length : P.shape[0]]
    return P[np.ix_(keep, keep)]
