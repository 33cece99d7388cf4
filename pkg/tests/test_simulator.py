import math

import numpy as np
import pandas as pd
import pytest

from pycmsckf.errors import InvalidSpec
from pycmsckf.propagation import ImuNoiseParams, propagate_mean
from pycmsckf.simulator import (
    GroundTruth,
    SensorConfig,
    TrajectorySpec,
    camera_times,
    export_streams,
    generate_landmarks,
    generate_trajectory,
    gps_times,
    gps_update_block,
    initial_estimate,
    synthesize_camera,
    synthesize_gps,
    synthesize_imu,
)
from pycmsckf.state import initial_covariance, initial_state
from pycmsckf.updates import full_update

SPEC = TrajectorySpec()
NOISELESS = SensorConfig(
    imu_noise=ImuNoiseParams.noiseless(),
    initial_gyro_bias_sigma=0.0,
    initial_accel_bias_sigma=0.0,
    pixel_sigma=0.0,
    gps_pos_sigma=0.0,
    gps_vel_sigma=0.0,
)


def _truth(spec=SPEC, landmarks=None):
    gt = GroundTruth(spec, *([np.zeros(0)] * 6))
    if landmarks is not None:
        gt.landmarks = np.asarray(landmarks, dtype=float)
    return gt


def test_lap_geometry():
    assert SPEC.lap_period == pytest.approx(40.0)
    np.testing.assert_allclose(SPEC.segment_boundaries, [0.0, 10.0, 20.0, 30.0, 40.0])
    gt = _truth()
    np.testing.assert_allclose(gt.at(0.0).position, [0.0, 0.0, 5.0])
    np.testing.assert_allclose(gt.at(10.0).position, [100.0, 0.0, 5.0], atol=1e-9)
    np.testing.assert_allclose(gt.at(20.0).position, [100.0, 200.0 / math.pi, 5.0], atol=1e-9)


@pytest.mark.parametrize("t", [0.0, 3.3, 12.5, 25.0, 37.1])
def test_constant_speed_and_periodicity(t):
    gt = _truth()
    sample = gt.at(t)
    assert np.linalg.norm(sample.velocity) == pytest.approx(10.0)
    later = gt.at(t + SPEC.lap_period)
    np.testing.assert_allclose(later.position, sample.position, atol=1e-9)
    np.testing.assert_allclose(later.attitude.matrix, sample.attitude.matrix, atol=1e-9)


def test_centripetal_acceleration_on_turns():
    gt = _truth()
    for t in (12.0, 15.0, 33.0):
        sample = gt.at(t)
        assert np.linalg.norm(sample.acceleration) == pytest.approx(100.0 / SPEC.turn_radius)
        assert sample.acceleration @ sample.velocity == pytest.approx(0.0, abs=1e-9)
        assert sample.angular_rate[2] == pytest.approx(10.0 / SPEC.turn_radius)
    assert not np.any(gt.at(5.0).acceleration)


def test_body_x_follows_velocity():
    gt = _truth()
    for t in (2.0, 14.0, 27.0, 36.0):
        sample = gt.at(t)
        body_x = sample.attitude.matrix.T @ [1.0, 0.0, 0.0]
        np.testing.assert_allclose(10.0 * body_x, sample.velocity, atol=1e-9)


def test_samples_are_kinematically_consistent():
    gt = generate_trajectory(TrajectorySpec(duration=40.0), dt=1e-3)
    dt = 1e-3
    t = gt.timestamps[1:-1]
    near_boundary = np.min(np.abs(t[:, None] - SPEC.segment_boundaries[None, :]), axis=1) < 2 * dt
    keep = ~near_boundary
    velocity = (gt.positions[2:] - gt.positions[:-2]) / (2 * dt)
    acceleration = (gt.velocities[2:] - gt.velocities[:-2]) / (2 * dt)
    yaw_rate = np.diff(np.unwrap(gt.yaws))[1:] / dt
    np.testing.assert_allclose(velocity[keep], gt.velocities[1:-1][keep], atol=1e-5)
    np.testing.assert_allclose(acceleration[keep], gt.accelerations[1:-1][keep], atol=1e-5)
    np.testing.assert_allclose(yaw_rate[keep], gt.angular_rates[2:, 2][keep], atol=1e-5)


def test_trajectory_rejects_bad_specs():
    with pytest.raises(InvalidSpec):
        TrajectorySpec(duration=30.0)
    with pytest.raises(InvalidSpec):
        TrajectorySpec(speed=0.0)
    with pytest.raises(InvalidSpec):
        generate_trajectory(SPEC, dt=0.02)
    with pytest.raises(InvalidSpec):
        SensorConfig(cam_rate=200.0)


def test_imu_is_deterministic():
    gt = _truth(TrajectorySpec(duration=40.0))
    a = synthesize_imu(gt, SensorConfig(), 11)
    b = synthesize_imu(gt, SensorConfig(), 11)
    c = synthesize_imu(gt, SensorConfig(), 12)
    assert len(a.samples) == 4001
    np.testing.assert_array_equal(a.samples[123].accel, b.samples[123].accel)
    np.testing.assert_array_equal(a.accel_bias, b.accel_bias)
    assert not np.array_equal(a.samples[123].gyro, c.samples[123].gyro)


def test_hover_measures_gravity():
    spec = TrajectorySpec(duration=45.0, hover_duration=5.0)
    imu = synthesize_imu(_truth(spec), SensorConfig(), 3)
    hover = imu.samples[:500]
    accel = np.array([s.accel for s in hover])
    gyro = np.array([s.gyro for s in hover])
    np.testing.assert_allclose(accel.mean(axis=0), [0.0, 0.0, 9.81], atol=0.03)
    np.testing.assert_allclose(accel.std(axis=0), 0.1, rtol=0.2)
    np.testing.assert_allclose(gyro.mean(axis=0), 0.0, atol=3e-3)
    np.testing.assert_allclose(gyro.std(axis=0), 0.01, rtol=0.2)


def test_noiseless_imu_integrates_back_to_truth():
    spec = TrajectorySpec(duration=60.0)
    gt = _truth(spec)
    stream = synthesize_imu(gt, NOISELESS, 0)
    imu = gt.at(0.0).imu_state()
    for sample in stream.samples[:-1]:
        imu = propagate_mean(imu, sample, 0.01)
    truth = gt.at(60.0)
    assert np.linalg.norm(imu.position - truth.position) < 1e-3
    np.testing.assert_allclose(imu.velocity, truth.velocity, atol=1e-4)
    np.testing.assert_allclose(imu.attitude.matrix, truth.attitude.matrix, atol=1e-6)


def test_camera_sees_what_is_ahead():
    gt = _truth(landmarks=[[10.0, 0.0, 5.0], [-10.0, 0.0, 5.0], [10.0, 30.0, 5.0]])
    frame = synthesize_camera(gt, NOISELESS, 0, 0.0)
    assert list(frame) == [0]
    np.testing.assert_allclose(frame[0], NOISELESS.camera.principal_point, atol=1e-9)


def test_camera_noise_is_deterministic_per_frame():
    gt = _truth(landmarks=[[10.0, 1.0, 5.0], [15.0, -2.0, 6.0]])
    a = synthesize_camera(gt, SensorConfig(), 5, 0.0)
    b = synthesize_camera(gt, SensorConfig(), 5, 0.0)
    assert sorted(a) == [0, 1]
    np.testing.assert_array_equal(a[1], b[1])


def test_sensor_grids():
    spec = TrajectorySpec(straight_length=20.0, turn_radius=20.0 / math.pi, duration=10.0)
    cams = camera_times(spec, SensorConfig())
    assert len(cams) == 300 and cams[-1] < 10.0
    np.testing.assert_allclose(gps_times(spec, SensorConfig()), np.arange(1.0, 11.0))


def test_gps_noise():
    gt = _truth()
    exact = synthesize_gps(gt, NOISELESS, 0, 4.0)
    np.testing.assert_array_equal(exact.position, gt.at(4.0).position)

    errors = np.array(
        [
            synthesize_gps(gt, SensorConfig(), seed, float(t)).position - gt.at(float(t)).position
            for seed in range(40)
            for t in range(1, 31)
        ]
    )
    assert errors.std() == pytest.approx(1.0, abs=0.06)
    again = synthesize_gps(gt, SensorConfig(), 7, 3.0)
    np.testing.assert_array_equal(again.velocity, synthesize_gps(gt, SensorConfig(), 7, 3.0).velocity)


def test_gps_block():
    gt = _truth()
    fix = synthesize_gps(gt, SensorConfig(), 1, 2.0)
    state = initial_state(gt.at(2.0).imu_state())
    block = gps_update_block(fix, state)
    assert block.H.shape == (6, 15)
    np.testing.assert_array_equal(block.H[:3, 12:15], np.eye(3))
    np.testing.assert_array_equal(block.H[3:, 6:9], np.eye(3))
    np.testing.assert_allclose(block.residual[:3], fix.position - gt.at(2.0).position)
    np.testing.assert_array_equal(np.diag(block.noise_cov), [1.0] * 3 + [0.01] * 3)

    cov = initial_covariance(SensorConfig().initial_covariance())
    _, new_cov, _ = full_update(state, cov, block)
    assert np.trace(new_cov.P_LL) < np.trace(cov.P_LL)


def test_landmarks_stay_in_band():
    config = SensorConfig()
    landmarks = generate_landmarks(SPEC, config, 2)
    assert landmarks.shape == (600, 3)
    assert landmarks[:, 2].min() >= 0.0 and landmarks[:, 2].max() <= 10.0
    track = generate_trajectory(TrajectorySpec(duration=40.0)).positions[:, :2]
    distance = np.array([np.min(np.linalg.norm(track - p, axis=1)) for p in landmarks[:, :2]])
    assert distance.min() >= 5.0 - 0.1
    assert distance.max() <= 20.0 + 0.1
    np.testing.assert_array_equal(landmarks, generate_landmarks(SPEC, config, 2))


def test_initial_estimate():
    gt = _truth()
    imu, P0 = initial_estimate(gt, SensorConfig(), 4)
    assert P0.shape == (15, 15)
    assert not np.any(imu.gyro_bias) and not np.any(imu.accel_bias)
    assert 0.0 < np.linalg.norm(imu.position - gt.at(0.0).position) < 5.0

    exact, _ = initial_estimate(
        gt,
        SensorConfig(
            initial_attitude_sigma=0.0, initial_velocity_sigma=0.0, initial_position_sigma=0.0
        ),
        4,
    )
    np.testing.assert_array_equal(exact.position, gt.at(0.0).position)


def test_export_streams(tmp_path):
    gt = _truth(TrajectorySpec(duration=40.0), landmarks=[[10.0, 0.0, 5.0]])
    imu = synthesize_imu(gt, SensorConfig(), 0)
    frames = [(t, synthesize_camera(gt, SensorConfig(), 0, t)) for t in (0.0, 1.0 / 30.0)]
    fixes = [synthesize_gps(gt, SensorConfig(), 0, 1.0)]
    export_streams(tmp_path / "streams", gt, imu, frames, fixes)

    camera = pd.read_csv(tmp_path / "streams" / "camera.csv")
    assert list(camera.columns) == ["timestamp", "feature_id", "u", "v"]
    assert len(camera) == 2
    assert len(pd.read_csv(tmp_path / "streams" / "imu.csv")) == 4001
    landmarks = pd.read_csv(tmp_path / "streams" / "landmarks.csv")
    assert list(landmarks.columns) == ["feature_id", "x", "y", "z"]
