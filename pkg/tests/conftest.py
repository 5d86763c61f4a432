import numpy as np
import pytest

from collabvio.state import (
    AgentState,
    ImuState,
    InverseDepthFeature,
    SlidingWindow,
    quat_exp,
)


def random_quat(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def random_state(rng, n_poses=3, n_features=2, window_size=8):
    """Random AgentState with a well-conditioned covariance."""
    imu = ImuState(rng.normal(size=3), rng.normal(size=3), random_quat(rng), 1e-3 * rng.normal(size=3), 1e-2 * rng.normal(size=3))
    win = SlidingWindow(
        window_size,
        rng.normal(size=(n_poses, 3)),
        np.array([random_quat(rng) for _ in range(n_poses)]).reshape(-1, 4),
        list(range(n_poses)),
        [0.1 * i for i in range(n_poses)],
    )
    feats = [
        InverseDepthFeature(rng.normal(scale=0.3), rng.normal(scale=0.3), rng.uniform(0.1, 1.0), int(rng.integers(n_poses)), 100 + j)
        for j in range(n_features)
    ]
    x = AgentState(imu, win, feats, np.eye(1), agent_id=0, time=0.0)
    A = rng.normal(size=(x.dim, x.dim))
    x.cov = 1e-3 * (A @ A.T / x.dim + np.eye(x.dim))
    return x


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_rotation(rng, scale=0.1):
    return quat_exp(scale * rng.normal(size=3))


def line_window_state(rng, n_poses=6, spacing=0.2, capacity=8, cov_scale=1e-4, tilt=0.05):
    """Window of cameras along x looking roughly down +z, with small random tilts."""
    positions = np.column_stack([spacing * np.arange(n_poses), np.zeros(n_poses), np.zeros(n_poses)])
    quats = np.array([quat_exp(tilt * rng.normal(size=3)) for _ in range(n_poses)])
    imu = ImuState(positions[-1].copy(), np.zeros(3), quats[-1].copy(), np.zeros(3), np.zeros(3))
    win = SlidingWindow(capacity, positions, quats, list(range(n_poses)), [0.1 * i for i in range(n_poses)])
    x = AgentState(imu, win, [], np.eye(1))
    x.cov = cov_scale * np.eye(x.dim)
    return x


def observe(x, p_w, frames=None):
    """Noiseless observations of ``p_w`` from the window poses."""
    from collabvio.vision import Observation, project

    frames = range(len(x.window)) if frames is None else frames
    out = []
    for i in frames:
        uv = project(x.window.positions[i], x.window.quats[i], p_w)
        out.append(Observation(float(uv[0]), float(uv[1]), x.window.frame_ids[i]))
    return out


def random_message(rng, M=4, N=3, d=None, track_lens=(2, 3), sender=1):
    """Seeded MessageUAV with arbitrary but well-formed contents."""
    from collabvio.comms import MessageUAV, WireTrack

    d = 15 + 6 * M + 3 * N if d is None else d
    A = rng.normal(size=(d, d))
    tracks = [
        WireTrack(
            int(rng.integers(2**32)),
            rng.integers(0, 256, 32, dtype=np.uint8).tobytes(),
            rng.normal(size=(n, 2)),
            rng.integers(0, 2**16, n).astype(np.int64),
        )
        for n in track_lens
    ]
    return MessageUAV(
        sender,
        float(rng.uniform(0, 100)),
        rng.normal(size=(M, 3)),
        np.array([random_quat(rng) for _ in range(M)]).reshape(-1, 4),
        rng.normal(size=(N, 3)),
        rng.integers(0, 2**16, N).astype(np.int64),
        rng.integers(0, 256, (N, 32), dtype=np.uint8),
        A @ A.T,
        tracks,
    )


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
