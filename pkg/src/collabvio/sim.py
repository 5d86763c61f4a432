"""Deterministic ground truth: trajectories, landmark fields, IMU and camera streams."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .propagation import GRAVITY, ImuNoiseParams, ImuSample
from .state import quat_to_rotation, rotation_to_quat
from .vision import Observation, Track

logger = logging.getLogger(__name__)

SCENARIO_VERSION = 1
DESCRIPTOR_BYTES = 32
R_DOWN = np.diag([1.0, -1.0, -1.0])  # camera/IMU frame looking straight down


class ScenarioError(ValueError):
    """Invalid or unreadable scenario description."""


# ---------------------------------------------------------------------------
# trajectories


def _quintic(tau):
    """Stop-and-go blend with zero velocity and acceleration at both ends."""
    s = 10 * tau**3 - 15 * tau**4 + 6 * tau**5
    ds = 30 * tau**2 - 60 * tau**3 + 30 * tau**4
    dds = 60 * tau - 180 * tau**2 + 120 * tau**3
    return s, ds, dds


def _rot_z(psi):
    c, s = np.cos(psi), np.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class Trajectory:
    """Position from ``kinematics``; attitude is a yaw oscillation about the
    downward-looking base orientation."""

    def __init__(self, yaw_amplitude=0.0, yaw_period=20.0, yaw_offset=0.0):
        self.yaw_amplitude = yaw_amplitude
        self.yaw_period = yaw_period
        self.yaw_offset = yaw_offset

    def kinematics(self, t):
        raise NotImplementedError

    def yaw(self, t):
        w = 2 * np.pi / self.yaw_period
        psi = self.yaw_offset + self.yaw_amplitude * np.sin(w * t)
        dpsi = self.yaw_amplitude * w * np.cos(w * t)
        return psi, dpsi

    def state(self, t):
        """``(p, v, a, R_wi, omega_body)`` at time ``t``."""
        p, v, a = self.kinematics(t)
        psi, dpsi = self.yaw(t)
        R_wi = _rot_z(psi) @ R_DOWN
        omega_b = R_wi.T @ np.array([0.0, 0.0, dpsi])
        return p, v, a, R_wi, omega_b


class SquareTrajectory(Trajectory):
    """Square loop, corners visited at multiples of ``period / 4``."""

    def __init__(self, side, altitude, period, center=(0.0, 0.0), phase=0.0, **yaw):
        if side <= 0 or period <= 0:
            raise ScenarioError("square trajectory needs positive side and period")
        super().__init__(**yaw)
        h = side / 2
        c = np.asarray(center, float)
        self.corners = np.array([[-h, -h], [h, -h], [h, h], [-h, h]]) + c
        self.altitude = altitude
        self.period = period
        self.phase = phase

    def kinematics(self, t):
        edge_t = self.period / 4
        u = ((t / self.period + self.phase) % 1.0) * 4
        k = int(np.floor(u)) % 4
        tau = u - np.floor(u)
        s, ds, dds = _quintic(tau)
        c0, c1 = self.corners[k], self.corners[(k + 1) % 4]
        d = c1 - c0
        p = np.array([*(c0 + s * d), self.altitude])
        v = np.array([*(ds / edge_t * d), 0.0])
        a = np.array([*(dds / edge_t**2 * d), 0.0])
        return p, v, a


class CircleTrajectory(Trajectory):
    def __init__(self, radius, altitude, period, center=(0.0, 0.0), phase=0.0, **yaw):
        if radius <= 0 or period <= 0:
            raise ScenarioError("circle trajectory needs positive radius and period")
        super().__init__(**yaw)
        self.radius, self.altitude, self.period, self.phase = radius, altitude, period, phase
        self.center = np.asarray(center, float)

    def kinematics(self, t):
        w = 2 * np.pi / self.period
        th = w * t + 2 * np.pi * self.phase
        r = self.radius
        p = np.array([*(self.center + r * np.array([np.cos(th), np.sin(th)])), self.altitude])
        v = np.array([-r * w * np.sin(th), r * w * np.cos(th), 0.0])
        a = np.array([-r * w**2 * np.cos(th), -r * w**2 * np.sin(th), 0.0])
        return p, v, a


class WaypointTrajectory(Trajectory):
    """C2 cubic spline through timed 3-D waypoints (clamped: zero end velocity)."""

    def __init__(self, times, points, **yaw):
        times = np.asarray(times, float)
        points = np.asarray(points, float)
        if len(times) < 2 or np.any(np.diff(times) <= 0) or points.shape != (len(times), 3):
            raise ScenarioError("waypoints need >= 2 strictly increasing times and Nx3 points")
        if np.allclose(points, points[0]):
            raise ScenarioError("zero-length waypoint trajectory")
        super().__init__(**yaw)
        self.spline = CubicSpline(times, points, bc_type="clamped")
        self.t0, self.t1 = times[0], times[-1]

    def kinematics(self, t):
        t = min(max(t, self.t0), self.t1)
        return self.spline(t), self.spline(t, 1), self.spline(t, 2)


def make_trajectory(spec):
    spec = dict(spec)
    kind = spec.pop("type", None)
    yaw = {k: spec.pop(k) for k in ("yaw_amplitude", "yaw_period", "yaw_offset") if k in spec}
    try:
        if kind == "square":
            return SquareTrajectory(**spec, **yaw)
        if kind == "circle":
            return CircleTrajectory(**spec, **yaw)
        if kind == "waypoints":
            return WaypointTrajectory(spec["times"], spec["points"], **yaw)
    except TypeError as exc:
        raise ScenarioError(f"bad {kind} trajectory: {exc}") from exc
    raise ScenarioError(f"unknown trajectory type {kind!r}")


# ---------------------------------------------------------------------------
# scenario


@dataclass
class CameraSpec:
    fov_x_deg: float = 95.0
    fov_y_deg: float = 80.0
    rate: float = 30.0
    sigma_v: float = 2e-3

    @property
    def half_tan(self):
        return np.tan(np.radians(self.fov_x_deg) / 2), np.tan(np.radians(self.fov_y_deg) / 2)


@dataclass
class ImuSpec:
    rate: float = 200.0
    sigma_g: float = 1.7e-3
    sigma_a: float = 2.0e-2
    sigma_bg: float = 2.0e-5
    sigma_ba: float = 3.0e-4
    bias_g_init: float = 1e-3
    bias_a_init: float = 1e-2

    def noise_params(self):
        return ImuNoiseParams(self.sigma_g, self.sigma_a, self.sigma_bg, self.sigma_ba, GRAVITY.copy())


@dataclass
class LandmarkSpec:
    count: int = 200
    low: tuple = (-12.0, -12.0, -1.0)
    high: tuple = (12.0, 12.0, 1.0)
    prototypes: int = 64
    prototype_spread: float = 0.25


@dataclass
class FilterSpec:
    window_size: int = 8
    max_slam_features: int = 10
    sigma_p0: float = 0.02
    sigma_v0: float = 0.02
    sigma_theta0: float = 0.005
    track_baseline_min: float = 0.1


@dataclass
class CommsSpec:
    latency: float = 0.01
    drop_prob: float = 0.0
    retrieval_threshold: float = 0.15
    keyframe_threshold: float = 0.15
    dedup_time: float = 1.0
    stale_time: float = 2.0


@dataclass
class Scenario:
    name: str
    agents: list
    duration: float = 20.0
    seed: int = 0
    camera: CameraSpec = field(default_factory=CameraSpec)
    imu: ImuSpec = field(default_factory=ImuSpec)
    landmarks: LandmarkSpec = field(default_factory=LandmarkSpec)
    filter: FilterSpec = field(default_factory=FilterSpec)
    comms: CommsSpec = field(default_factory=CommsSpec)
    p_flip: float = 0.02
    dropout: float = 0.03
    initial_error: bool = True

    def __post_init__(self):
        if self.duration <= 0:
            raise ScenarioError("duration must be positive")
        if self.camera.rate <= 0 or self.imu.rate <= 0:
            raise ScenarioError("rates must be positive")
        if not self.agents:
            raise ScenarioError("scenario needs at least one agent")
        if not 0 <= self.p_flip <= 1 or not 0 <= self.dropout <= 1:
            raise ScenarioError("probabilities must lie in [0, 1]")
        for spec in self.agents:
            make_trajectory(spec)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        version = d.pop("version", SCENARIO_VERSION)
        if version != SCENARIO_VERSION:
            raise ScenarioError(f"unsupported scenario version {version}")
        sub = {"camera": CameraSpec, "imu": ImuSpec, "landmarks": LandmarkSpec, "filter": FilterSpec, "comms": CommsSpec}
        try:
            for key, typ in sub.items():
                if key in d:
                    d[key] = typ(**d[key])
            return cls(**d)
        except TypeError as exc:
            raise ScenarioError(str(exc)) from exc

    def to_dict(self):
        d = asdict(self)
        d["version"] = SCENARIO_VERSION
        d["landmarks"]["low"] = list(self.landmarks.low)
        d["landmarks"]["high"] = list(self.landmarks.high)
        return d

    def with_noise_disabled(self):
        d = self.to_dict()
        d["camera"]["sigma_v"] = 0.0
        for k in ("sigma_g", "sigma_a", "sigma_bg", "sigma_ba", "bias_g_init", "bias_a_init"):
            d["imu"][k] = 0.0
        d["p_flip"] = 0.0
        d["initial_error"] = False
        return Scenario.from_dict(d)


def load_scenario(path):
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    return Scenario.from_dict(d)


def builtin_scenario(name):
    """Scenarios shipped with the package: ``overlap_square``, ``parallel``, ``zero_noise``."""
    path = Path(__file__).parent / "scenarios" / f"{name}.json"
    if not path.exists():
        raise ScenarioError(f"no built-in scenario {name!r}")
    return load_scenario(path)


# ---------------------------------------------------------------------------
# truth generation


@dataclass
class LandmarkTruth:
    ids: np.ndarray
    positions: np.ndarray
    descriptors: np.ndarray  # (n, 32) uint8


@dataclass
class AgentTruth:
    imu_samples: list
    frame_times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    quats: np.ndarray  # q_w_i at camera frames
    b_g: np.ndarray
    b_a: np.ndarray


def random_descriptors(rng, n):
    return rng.integers(0, 256, size=(n, DESCRIPTOR_BYTES), dtype=np.uint8)


def flip_bits(rng, descriptors, p):
    """Flip each bit independently with probability ``p``."""
    descriptors = np.asarray(descriptors, dtype=np.uint8)
    if p <= 0:
        return descriptors.copy()
    bits = np.unpackbits(descriptors, axis=-1)
    mask = (rng.random(bits.shape) < p).astype(np.uint8)
    return np.packbits(bits ^ mask, axis=-1)


def generate_landmarks(spec, rng):
    lo, hi = np.asarray(spec.low, float), np.asarray(spec.high, float)
    pos = lo + (hi - lo) * rng.random((spec.count, 3))
    protos = random_descriptors(rng, spec.prototypes)
    which = rng.integers(0, spec.prototypes, size=spec.count)
    desc = flip_bits(rng, protos[which], spec.prototype_spread)
    return LandmarkTruth(np.arange(spec.count), pos, desc)


def _agent_truth(traj, scenario, rng):
    imu = scenario.imu
    n_imu = int(round(scenario.duration * imu.rate)) + 1
    t_imu = np.arange(n_imu) / imu.rate
    dt = 1.0 / imu.rate
    b_g = rng.normal(0, imu.bias_g_init, 3) if imu.bias_g_init > 0 else np.zeros(3)
    b_a = rng.normal(0, imu.bias_a_init, 3) if imu.bias_a_init > 0 else np.zeros(3)
    samples = []
    bg_hist, ba_hist = np.zeros((n_imu, 3)), np.zeros((n_imu, 3))
    for k, t in enumerate(t_imu):
        _, _, a, R_wi, omega_b = traj.state(t)
        f_b = R_wi.T @ (a - GRAVITY)
        noise_g = rng.normal(0, imu.sigma_g / np.sqrt(dt), 3) if imu.sigma_g > 0 else 0.0
        noise_a = rng.normal(0, imu.sigma_a / np.sqrt(dt), 3) if imu.sigma_a > 0 else 0.0
        samples.append(ImuSample(omega_b + b_g + noise_g, f_b + b_a + noise_a, float(t)))
        bg_hist[k], ba_hist[k] = b_g, b_a
        if imu.sigma_bg > 0:
            b_g = b_g + rng.normal(0, imu.sigma_bg * np.sqrt(dt), 3)
        if imu.sigma_ba > 0:
            b_a = b_a + rng.normal(0, imu.sigma_ba * np.sqrt(dt), 3)
    n_frames = int(np.floor(scenario.duration * scenario.camera.rate + 1e-9))  # frames on [0, duration)
    frame_times = np.arange(n_frames) / scenario.camera.rate
    P, V, Q = np.zeros((n_frames, 3)), np.zeros((n_frames, 3)), np.zeros((n_frames, 4))
    for k, t in enumerate(frame_times):
        p, v, _, R_wi, _ = traj.state(t)
        P[k], V[k], Q[k] = p, v, rotation_to_quat(R_wi.T)
    idx = np.searchsorted(t_imu, frame_times - 1e-12)
    idx = np.clip(idx, 0, n_imu - 1)
    return AgentTruth(samples, frame_times, P, V, Q, bg_hist[idx], ba_hist[idx])


def generate_truth(scenario):
    """Landmarks plus per-agent IMU and pose streams, a pure function of the scenario."""
    root = np.random.SeedSequence(scenario.seed)
    lm_seq, *agent_seqs = root.spawn(1 + len(scenario.agents))
    landmarks = generate_landmarks(scenario.landmarks, np.random.default_rng(lm_seq))
    agents = [
        _agent_truth(make_trajectory(spec), scenario, np.random.default_rng(seq))
        for spec, seq in zip(scenario.agents, agent_seqs)
    ]
    return landmarks, agents


def export_truth_csv(agent_truth, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz"])
        for t, p, v, q in zip(agent_truth.frame_times, agent_truth.positions, agent_truth.velocities, agent_truth.quats):
            w.writerow([repr(float(t)), *map(float, p), *map(float, v), *map(float, q)])


# ---------------------------------------------------------------------------
# camera


@dataclass
class FrameObservation:
    landmark_id: int
    u: float
    v: float
    descriptor: np.ndarray


def synthesize_frame(p_cam, q_cam, landmarks, camera, rng, p_flip=0.0, sigma_v=None):
    """Noisy normalized projections of visible landmarks with noisy descriptors."""
    sigma_v = camera.sigma_v if sigma_v is None else sigma_v
    tx, ty = camera.half_tan
    C = quat_to_rotation(q_cam)
    pc = (landmarks.positions - p_cam) @ C.T
    z = pc[:, 2]
    visible = z > 1e-3
    uv = np.zeros((len(z), 2))
    uv[visible] = pc[visible, :2] / z[visible, None]
    visible &= (np.abs(uv[:, 0]) <= tx) & (np.abs(uv[:, 1]) <= ty)
    ids = np.flatnonzero(visible)
    if sigma_v > 0:
        noisy = uv[ids] + rng.normal(0, sigma_v, (len(ids), 2))
    else:
        noisy = uv[ids]
    desc = flip_bits(rng, landmarks.descriptors[ids], p_flip)
    out = []
    for k, lid in enumerate(ids):
        u, v = noisy[k]
        if abs(u) > tx or abs(v) > ty:
            continue
        out.append(FrameObservation(int(landmarks.ids[lid]), float(u), float(v), desc[k]))
    return out


# ---------------------------------------------------------------------------
# track manager


class TrackManager:
    """Front-end emulation: tracks persist by landmark identity until a
    per-frame Bernoulli dropout or the landmark leaves the view."""

    def __init__(self, dropout=0.0, rng=None, first_id=0):
        self.dropout = dropout
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.next_id = first_id
        self.active = {}  # landmark id -> Track
        self.terminations = 0
        self.track_frames = 0

    def _new_track(self, fo, frame, t):
        tr = Track(self.next_id, [Observation(fo.u, fo.v, frame, t)], fo.descriptor, landmark_id=fo.landmark_id)
        self.next_id += 1
        return tr

    def step(self, frame, t, observations):
        """Ingest one frame; returns ``(active_tracks, finished_tracks)``."""
        seen = {}
        finished = []
        for fo in observations:
            tr = self.active.get(fo.landmark_id)
            if tr is not None and self.dropout > 0 and self.rng.random() < self.dropout:
                tr.alive = False
                finished.append(tr)
                self.terminations += 1
                tr = None
            if tr is None:
                tr = self._new_track(fo, frame, t)
            else:
                tr.observations.append(Observation(fo.u, fo.v, frame, t))
                tr.descriptor = fo.descriptor
            seen[fo.landmark_id] = tr
        for lid, tr in self.active.items():
            if lid not in seen:
                tr.alive = False
                finished.append(tr)
        self.active = seen
        self.track_frames += len(seen)
        return list(seen.values()), finished

    def retire(self, track_ids):
        """Stop extending the given tracks; their landmarks start new tracks."""
        track_ids = set(track_ids)
        for lid in [lid for lid, tr in self.active.items() if tr.track_id in track_ids]:
            del self.active[lid]


__all__ = [
    "Scenario",
    "ScenarioError",
    "CameraSpec",
    "ImuSpec",
    "LandmarkSpec",
    "FilterSpec",
    "CommsSpec",
    "SquareTrajectory",
    "CircleTrajectory",
    "WaypointTrajectory",
    "make_trajectory",
    "load_scenario",
    "builtin_scenario",
    "LandmarkTruth",
    "AgentTruth",
    "generate_truth",
    "synthesize_frame",
    "flip_bits",
    "TrackManager",
]
