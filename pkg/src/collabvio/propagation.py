"""IMU propagation and sliding-window stochastic cloning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .state import (
    FEATURE_DIM,
    IMU_DIM,
    POSE_DIM,
    condition_covariance,
    delete_block,
    feature_offset,
    pose_offset,
    quat_exp,
    quat_mul,
    quat_normalize,
    quat_to_rotation,
    skew,
)

GRAVITY = np.array([0.0, 0.0, -9.81])


class PropagationGapError(ValueError):
    """Raised when the IMU stream has a hole longer than the allowed gap."""


@dataclass
class ImuSample:
    omega_meas: np.ndarray
    accel_meas: np.ndarray
    t: float


@dataclass
class ImuNoiseParams:
    """White-noise and bias random-walk densities (per sqrt(Hz))."""

    sigma_g: float = 0.0
    sigma_a: float = 0.0
    sigma_bg: float = 0.0
    sigma_ba: float = 0.0
    g_w: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def __post_init__(self):
        for name in ("sigma_g", "sigma_a", "sigma_bg", "sigma_ba"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        self.g_w = np.asarray(self.g_w, dtype=float)


def _integrals(omega, dt):
    """First and second time integrals of ``Exp(omega * s)`` over ``[0, dt]``."""
    w = np.linalg.norm(omega)
    K = skew(omega)
    K2 = K @ K
    phi = w * dt
    I = np.eye(3)
    if phi < 1e-4:
        g1 = dt * I + dt**2 / 2 * K + dt**3 / 6 * K2
        g2 = dt**2 / 2 * I + dt**3 / 6 * K + dt**4 / 24 * K2
    else:
        s, c = np.sin(phi), np.cos(phi)
        g1 = dt * I + (1 - c) / w**2 * K + (phi - s) / w**3 * K2
        g2 = dt**2 / 2 * I + (phi - s) / w**3 * K + (phi**2 / 2 - 1 + c) / w**4 * K2
    return g1, g2


def _measurements_at(times, values, ts):
    return np.column_stack([np.interp(ts, times, values[:, k]) for k in range(values.shape[1])])


def _check_stream(samples, t_start, t_end, max_gap):
    times = np.array([s.t for s in samples], dtype=float)
    if len(times) == 0:
        raise PropagationGapError("no IMU samples")
    if np.any(np.diff(times) <= 0):
        raise ValueError("IMU timestamps must be strictly increasing")
    inside = times[(times > t_start) & (times < t_end)]
    grid = np.concatenate(([t_start], inside, [t_end]))
    support = np.concatenate(([max(times[0], t_start)], inside, [min(times[-1], t_end)]))
    if times[0] - t_start > max_gap or t_end - times[-1] > max_gap:
        raise PropagationGapError("IMU stream does not cover the propagation interval")
    if np.any(np.diff(support) > max_gap):
        raise PropagationGapError("gap in IMU stream exceeds max_gap")
    return times, grid


_I15 = np.eye(IMU_DIM)
_A_CONST = np.zeros((IMU_DIM, IMU_DIM))
_A_CONST[0:3, 3:6] = np.eye(3)
_A_CONST[6:9, 9:12] = -np.eye(3)
_G_CONST = np.zeros((IMU_DIM, 12))
_G_CONST[6:9, 0:3] = -np.eye(3)
_G_CONST[9:12, 6:9] = np.eye(3)
_G_CONST[12:15, 9:12] = np.eye(3)


def imu_step(p, v, q, b_g, b_a, w0, w1, a0, a1, dt, g_w):
    """One interval of midpoint integration, exact for the averaged inputs.

    Returns the new ``(p, v, q)`` and the error-state transition ``Phi`` (15x15)
    plus the noise input matrix ``G`` (15x12) for the interval.
    """
    omega = 0.5 * (w0 + w1) - b_g
    acc = 0.5 * (a0 + a1) - b_a
    R = quat_to_rotation(q).T
    g1, g2 = _integrals(omega, dt)
    p_new = p + v * dt + 0.5 * g_w * dt**2 + R @ (g2 @ acc)
    v_new = v + g_w * dt + R @ (g1 @ acc)
    q_new = quat_normalize(quat_mul(q, quat_exp(omega * dt)))

    R_mid = R @ quat_to_rotation(quat_exp(0.5 * omega * dt)).T
    Ad = _A_CONST * dt
    Ad[3:6, 6:9] = -dt * (R_mid @ skew(acc))
    Ad[3:6, 12:15] = -dt * R_mid
    Ad[6:9, 6:9] = -dt * skew(omega)
    Phi = _I15 + Ad + 0.5 * Ad @ Ad
    G = _G_CONST.copy()
    G[3:6, 3:6] = -R_mid
    return p_new, v_new, q_new, Phi, G


def propagate(x, samples, t_end, noise, max_gap=0.05):
    """Predict ``x`` forward to ``t_end`` with the IMU ``samples``.

    Measurements between samples are linearly interpolated; each sub-interval
    is integrated with the averaged (midpoint) inputs.  Only the IMU block of
    the covariance and its cross terms are touched.
    """
    if t_end < x.time:
        raise ValueError("cannot propagate backwards in time")
    if t_end == x.time:
        return x.copy()
    times, grid = _check_stream(samples, x.time, t_end, max_gap)
    omegas = np.array([s.omega_meas for s in samples], dtype=float)
    accels = np.array([s.accel_meas for s in samples], dtype=float)

    imu = x.imu
    p, v, q = imu.p_w_i.copy(), imu.v_w_i.copy(), imu.q_w_i.copy()
    qc = np.repeat([noise.sigma_g**2, noise.sigma_a**2, noise.sigma_bg**2, noise.sigma_ba**2], 3)
    Phi_total = np.eye(IMU_DIM)
    Q_total = np.zeros((IMU_DIM, IMU_DIM))
    W = _measurements_at(times, omegas, grid)
    A = _measurements_at(times, accels, grid)
    for k in range(len(grid) - 1):
        dt = grid[k + 1] - grid[k]
        p, v, q, Phi, G = imu_step(p, v, q, imu.b_g, imu.b_a, W[k], W[k + 1], A[k], A[k + 1], dt, noise.g_w)
        PG = Phi @ G
        Qd = (PG * qc) @ PG.T * dt
        Phi_total = Phi @ Phi_total
        Q_total = Phi @ Q_total @ Phi.T + Qd

    y = x.copy()
    y.imu.p_w_i, y.imu.v_w_i, y.imu.q_w_i = p, v, q
    y.time = t_end
    P = y.cov
    P[:IMU_DIM, :IMU_DIM] = Phi_total @ P[:IMU_DIM, :IMU_DIM] @ Phi_total.T + Q_total
    P[:IMU_DIM, IMU_DIM:] = Phi_total @ P[:IMU_DIM, IMU_DIM:]
    P[IMU_DIM:, :IMU_DIM] = P[:IMU_DIM, IMU_DIM:].T
    y.cov = condition_covariance(P)
    return y


# ---------------------------------------------------------------------------
# stochastic cloning


def _reanchor_jacobian(x, j, new_anchor, z_min):
    """Jacobian rows of the re-anchored feature ``j`` and its new parameters."""
    f = x.features[j]
    win = x.window
    a = f.anchor_index
    R_a = win.rotation(a).T
    C_n = win.rotation(new_anchor)
    m = np.array([f.alpha, f.beta, 1.0])
    p_w = win.positions[a] + R_a @ m / f.rho
    h = C_n @ (p_w - win.positions[new_anchor])
    if h[2] <= z_min:
        return None, None
    J_h = np.array(
        [
            [1 / h[2], 0.0, -h[0] / h[2] ** 2],
            [0.0, 1 / h[2], -h[1] / h[2] ** 2],
            [0.0, 0.0, -1 / h[2] ** 2],
        ]
    )
    rows = np.zeros((FEATURE_DIM, x.dim))
    oa, on = pose_offset(a), pose_offset(new_anchor)
    of = feature_offset(len(win), j)
    rows[:, oa : oa + 3] += J_h @ C_n
    rows[:, oa + 3 : oa + 6] += J_h @ (-C_n @ R_a @ skew(m / f.rho))
    rows[:, on : on + 3] += J_h @ (-C_n)
    rows[:, on + 3 : on + 6] += J_h @ skew(h)
    dh_dfeat = C_n @ R_a @ np.column_stack([[1 / f.rho, 0, 0], [0, 1 / f.rho, 0], -m / f.rho**2])
    rows[:, of : of + 3] = J_h @ dh_dfeat
    return rows, (h[0] / h[2], h[1] / h[2], 1.0 / h[2])


def marginalize_oldest_pose(x, z_min=1e-3):
    """Remove window pose 0; features anchored there move to the newest pose."""
    y = x.copy()
    n = len(y.window)
    newest = n - 1
    T = np.eye(y.dim)
    dropped = []
    for j, f in enumerate(y.features):
        if f.anchor_index != 0:
            continue
        rows, params = _reanchor_jacobian(y, j, newest, z_min)
        if rows is None:
            dropped.append(j)
            continue
        of = feature_offset(n, j)
        T[of : of + 3] = rows
        f.alpha, f.beta, f.rho = params
        f.anchor_index = newest
    P = T @ y.cov @ T.T
    for j in sorted(dropped, reverse=True):
        P = delete_block(P, feature_offset(n, j), FEATURE_DIM)
        del y.features[j]
    P = delete_block(P, pose_offset(0), POSE_DIM)
    win = y.window
    win.positions = win.positions[1:]
    win.quats = win.quats[1:]
    win.frame_ids = win.frame_ids[1:]
    win.times = win.times[1:]
    for f in y.features:
        f.anchor_index -= 1
    y.cov = condition_covariance(P)
    return y


def augment_window(x, frame_id=None, q_i_c=None, p_i_c=None, z_min=1e-3):
    """Clone the current camera pose into the window.

    The camera pose is ``(q_w_i (x) q_i_c, p_w_i + R_w_i p_i_c)``; the default
    extrinsics are identity.  When the window exceeds capacity the oldest pose
    is marginalized.
    """
    q_i_c = np.array([1.0, 0, 0, 0]) if q_i_c is None else np.asarray(q_i_c, float)
    p_i_c = np.zeros(3) if p_i_c is None else np.asarray(p_i_c, float)
    y = x.copy()
    imu = y.imu
    R_wi = quat_to_rotation(imu.q_w_i).T
    C_ic = quat_to_rotation(q_i_c)
    p_c = imu.p_w_i + R_wi @ p_i_c
    q_c = quat_normalize(quat_mul(imu.q_w_i, q_i_c))

    J = np.zeros((POSE_DIM, y.dim))
    J[0:3, 0:3] = np.eye(3)
    J[0:3, 6:9] = -R_wi @ skew(p_i_c)
    J[3:6, 6:9] = C_ic
    n = len(y.window)
    ins = pose_offset(n)
    P = y.cov
    cross = J @ P
    new_dim = y.dim + POSE_DIM
    P_aug = np.zeros((new_dim, new_dim))
    old = np.r_[0:ins, ins + POSE_DIM : new_dim]
    P_aug[np.ix_(old, old)] = P
    P_aug[ins : ins + POSE_DIM, old] = cross
    P_aug[old, ins : ins + POSE_DIM] = cross.T
    P_aug[ins : ins + POSE_DIM, ins : ins + POSE_DIM] = cross @ J.T
    win = y.window
    win.positions = np.vstack([win.positions, p_c])
    win.quats = np.vstack([win.quats, q_c])
    if frame_id is None:
        frame_id = (win.frame_ids[-1] + 1) if win.frame_ids else 0
    win.frame_ids = win.frame_ids + [frame_id]
    win.times = win.times + [y.time]
    y.cov = condition_covariance(P_aug)
    if len(win) > win.capacity:
        y = marginalize_oldest_pose(y, z_min=z_min)
    return y
