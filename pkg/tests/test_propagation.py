import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabvio.propagation import (
    GRAVITY,
    ImuNoiseParams,
    ImuSample,
    PropagationGapError,
    augment_window,
    propagate,
)
from collabvio.sim import builtin_scenario, generate_truth
from collabvio.state import ImuState, initial_state, pose_offset, quat_to_rotation

from conftest import random_quat


def constant_stream(omega, accel, t0=0.0, t1=1.0, rate=200.0):
    n = int(round((t1 - t0) * rate)) + 1
    return [ImuSample(np.array(omega, float), np.array(accel, float), t0 + k / rate) for k in range(n)]


def rest_state(q=(1.0, 0, 0, 0), cov=None, window=4):
    imu = ImuState(np.zeros(3), np.zeros(3), np.array(q, float), np.zeros(3), np.zeros(3))
    return initial_state(imu, np.zeros((15, 15)) if cov is None else cov, window)


def test_stationary_agent_stays_put(rng):
    q = random_quat(rng)
    accel = quat_to_rotation(q) @ (-GRAVITY)  # specific force reaction to gravity
    x = propagate(rest_state(q), constant_stream([0, 0, 0], accel), 1.0, ImuNoiseParams())
    assert np.allclose(x.imu.p_w_i, 0, atol=1e-9)
    assert np.allclose(x.imu.v_w_i, 0, atol=1e-9)


def test_free_fall_kinematics():
    x = propagate(rest_state(), constant_stream([0, 0, 0], [0, 0, 0]), 1.0, ImuNoiseParams())
    assert np.allclose(x.imu.p_w_i, 0.5 * GRAVITY, atol=1e-6)
    assert np.allclose(x.imu.v_w_i, GRAVITY, atol=1e-6)


def test_attitude_covariance_follows_random_walk():
    sigma_g = 0.01
    x = rest_state()
    y = propagate(x, constant_stream([0, 0, 0], -GRAVITY), 1.0, ImuNoiseParams(sigma_g=sigma_g))
    tr0, tr1 = np.trace(x.cov[6:9, 6:9]), np.trace(y.cov[6:9, 6:9])
    assert tr1 > tr0
    # closed form for pure attitude random walk: 3 axes * sigma_g^2 * t
    assert abs(tr1 - 3 * sigma_g**2 * 1.0) / (3 * sigma_g**2) < 0.05


def test_two_half_intervals_equal_one_full(rng):
    omega, accel = [0.1, -0.2, 0.3], [0.5, 0.2, 9.0]
    stream = constant_stream(omega, accel)
    noise = ImuNoiseParams(1e-3, 1e-2, 1e-5, 1e-4)
    x = rest_state(random_quat(rng), cov=1e-4 * np.eye(15))
    full = propagate(x, stream, 1.0, noise)
    half = propagate(propagate(x, stream, 0.5, noise), stream, 1.0, noise)
    assert np.allclose(full.imu.p_w_i, half.imu.p_w_i, atol=1e-9)
    assert np.allclose(full.imu.v_w_i, half.imu.v_w_i, atol=1e-9)
    assert np.allclose(full.imu.q_w_i, half.imu.q_w_i, atol=1e-9)
    assert np.allclose(full.cov, half.cov, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_propagation_keeps_covariance_symmetric_psd(seed):
    rng = np.random.default_rng(seed)
    x = rest_state(random_quat(rng), cov=np.diag(rng.uniform(1e-6, 1e-2, 15)))
    x = augment_window(x, frame_id=0)
    stream = constant_stream(rng.normal(size=3), rng.normal(size=3) + [0, 0, 9.81], t1=0.2)
    y = propagate(x, stream, 0.2, ImuNoiseParams(1e-3, 1e-2, 1e-5, 1e-4))
    assert np.array_equal(y.cov, y.cov.T)
    assert np.linalg.eigvalsh(y.cov).min() >= -1e-8
    # window pose mean untouched, IMU-window cross terms propagated
    assert np.array_equal(y.window.positions, x.window.positions)


def test_gap_and_ordering_errors():
    x = rest_state()
    stream = constant_stream([0, 0, 0], -GRAVITY, t1=0.2)
    with pytest.raises(PropagationGapError):
        propagate(x, stream, 1.0, ImuNoiseParams())
    holey = stream[:5] + stream[30:]
    with pytest.raises(PropagationGapError):
        propagate(x, holey, 0.2, ImuNoiseParams())
    with pytest.raises(ValueError):
        propagate(x, stream[::-1], 0.2, ImuNoiseParams())


def test_clone_reads_back_and_correlates(rng):
    cov = np.diag(rng.uniform(1e-4, 1e-2, 15))
    x = rest_state(random_quat(rng), cov=cov)
    x.imu.p_w_i = rng.normal(size=3)
    y = augment_window(x, frame_id=0)
    assert np.array_equal(y.window.positions[-1], x.imu.p_w_i)
    assert np.allclose(y.window.quats[-1], x.imu.q_w_i, atol=1e-15)
    o = pose_offset(0)
    pose_idx = np.r_[0:3, 6:9]
    assert np.allclose(y.cov[o : o + 6, :15][:, pose_idx], cov[np.ix_(pose_idx, pose_idx)], atol=1e-15)
    assert np.allclose(y.cov[o : o + 6, o : o + 6], cov[np.ix_(pose_idx, pose_idx)], atol=1e-15)


def test_window_length_capped_at_capacity(rng):
    x = rest_state(cov=1e-4 * np.eye(15), window=3)
    for k in range(5):
        x.imu.p_w_i = np.array([float(k), 0, 0])
        x = augment_window(x, frame_id=k)
        assert len(x.window) == min(k + 1, 3)
    assert x.window.frame_ids == [2, 3, 4]
    assert x.cov.shape == (15 + 18, 15 + 18)


def test_zero_noise_propagation_tracks_simulated_truth():
    sc = builtin_scenario("zero_noise")
    _, agents = generate_truth(sc)
    tr = agents[0]
    imu = ImuState(tr.positions[0], tr.velocities[0], tr.quats[0], tr.b_g[0], tr.b_a[0])
    x = initial_state(imu, np.zeros((15, 15)), 8)
    t_imu = np.array([s.t for s in tr.imu_samples])
    worst = 0.0
    for k in range(1, len(tr.frame_times)):
        t0, t1 = x.time, tr.frame_times[k]
        lo = max(np.searchsorted(t_imu, t0, side="right") - 1, 0)
        hi = np.searchsorted(t_imu, t1, side="left") + 1
        x = propagate(x, tr.imu_samples[lo:hi], t1, ImuNoiseParams())
        worst = max(worst, np.linalg.norm(x.imu.p_w_i - tr.positions[k]))
    assert tr.frame_times[-1] >= 10.0 - 1.0 / sc.camera.rate - 1e-9
    assert worst <= 1e-4
