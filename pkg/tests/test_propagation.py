import numpy as np
import pytest

from conftest import random_covariance, random_filter
from pycmsckf.accumulator import CompressedAccumulator
from pycmsckf.errors import DimensionMismatch, FilterError, InvalidSpec, NonPositiveDt
from pycmsckf.geom import UnitQuaternion
from pycmsckf.propagation import (
    GRAVITY,
    ImuNoiseParams,
    ImuSample,
    TransitionBlock,
    compute_transition,
    propagate_covariance,
    propagate_mean,
)
from pycmsckf.state import (
    IMU_DIM,
    ImuState,
    PartitionedCovariance,
    apply_correction,
    initial_state,
    state_difference,
)


def _moving_imu(rng):
    return ImuState(
        UnitQuaternion.from_rotvec(rng.normal(0.0, 0.5, 3)),
        rng.normal(0.0, 1e-2, 3),
        rng.normal(0.0, 5.0, 3),
        rng.normal(0.0, 0.1, 3),
        rng.normal(0.0, 10.0, 3),
    )


def _sample(rng):
    return ImuSample(0.0, rng.normal(0.0, 3.0, 3) + [0.0, 0.0, 9.81], rng.normal(0.0, 0.8, 3))


def test_hover_stays_put():
    imu = ImuState.at_rest(position=[1.0, 2.0, 3.0])
    sample = ImuSample(0.0, -GRAVITY, np.zeros(3))
    for _ in range(100):
        imu = propagate_mean(imu, sample, 0.01)
    np.testing.assert_allclose(imu.position, [1.0, 2.0, 3.0], atol=1e-12)
    np.testing.assert_allclose(imu.velocity, 0.0, atol=1e-12)


def test_free_fall_is_exact():
    imu = ImuState.at_rest()
    imu = ImuState(imu.attitude, imu.gyro_bias, [1.0, 0.0, 0.0], imu.accel_bias, imu.position)
    new = propagate_mean(imu, ImuSample(0.0, np.zeros(3), np.zeros(3)), 0.1)
    np.testing.assert_allclose(new.velocity, [1.0, 0.0, 0.0] + 0.1 * GRAVITY, atol=1e-14)
    np.testing.assert_allclose(new.position, [0.1, 0.0, 0.0] + 0.005 * GRAVITY, atol=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_transition_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    imu = _moving_imu(rng)
    sample = _sample(rng)
    dt = 0.01
    tb = compute_transition(imu, sample, dt, ImuNoiseParams())
    base = initial_state(imu)
    nominal = initial_state(propagate_mean(imu, sample, dt))

    eps = 1e-6
    J = np.zeros((IMU_DIM, IMU_DIM))
    for i in range(IMU_DIM):
        d = np.zeros(IMU_DIM)
        d[i] = eps
        plus = initial_state(propagate_mean(apply_correction(base, d).imu, sample, dt))
        minus = initial_state(propagate_mean(apply_correction(base, -d).imu, sample, dt))
        J[:, i] = (state_difference(plus, nominal) - state_difference(minus, nominal)) / (2 * eps)
    np.testing.assert_allclose(tb.J, J, atol=1e-5)


def test_discrete_noise_is_psd(rng):
    tb = compute_transition(_moving_imu(rng), _sample(rng), 0.05, ImuNoiseParams())
    np.testing.assert_array_equal(tb.Q, tb.Q.T)
    assert np.linalg.eigvalsh(tb.Q).min() > -1e-15
    assert np.all(np.diag(tb.Q)[3:6] > 0.0)

    silent = compute_transition(_moving_imu(rng), _sample(rng), 0.05, ImuNoiseParams.noiseless())
    assert not np.any(silent.Q)


@pytest.mark.parametrize("dt, error", [(0.0, NonPositiveDt), (-0.01, NonPositiveDt), (0.2, FilterError)])
def test_rejects_bad_dt(rng, dt, error):
    with pytest.raises(error):
        propagate_mean(_moving_imu(rng), _sample(rng), dt)
    with pytest.raises(error):
        compute_transition(_moving_imu(rng), _sample(rng), dt, ImuNoiseParams())


def test_rejects_negative_noise():
    with pytest.raises(InvalidSpec):
        ImuNoiseParams(gyro_noise_density=-1.0)
    with pytest.raises(InvalidSpec):
        ImuNoiseParams(accel_bias_walk=float("nan"))


def test_deferred_cross_covariance_matches_dense(rng):
    _, cov = random_filter(rng, n_clones=2, n_keyframes=4, n_global=2)
    acc = CompressedAccumulator.reset(cov.local_dim)
    dense = cov.copy()
    deferred = cov.copy()
    imu = _moving_imu(rng)
    for _ in range(20):
        sample = _sample(rng)
        tb = compute_transition(imu, sample, 0.01, ImuNoiseParams())
        imu = propagate_mean(imu, sample, 0.01)
        dense, _ = propagate_covariance(dense, tb)
        deferred, acc = propagate_covariance(deferred, tb, acc)

    assert not acc.is_reset()
    np.testing.assert_array_equal(deferred.P_LG, cov.P_LG)
    np.testing.assert_allclose(deferred.P_LL, dense.P_LL, atol=1e-12)
    np.testing.assert_allclose(acc.T @ cov.P_LG, dense.P_LG, atol=1e-10)
    np.testing.assert_array_equal(dense.P_GG, cov.P_GG)


def test_covariance_only_touches_imu_rows(rng):
    P = random_covariance(rng, IMU_DIM + 12)
    cov = PartitionedCovariance.from_full(P, IMU_DIM + 12)
    tb = TransitionBlock(np.eye(IMU_DIM), np.zeros((IMU_DIM, IMU_DIM)), 0.01)
    new, acc = propagate_covariance(cov, tb)
    assert acc is None
    np.testing.assert_allclose(new.full(), 0.5 * (P + P.T), atol=1e-15)

    with pytest.raises(DimensionMismatch):
        propagate_covariance(cov, TransitionBlock(np.eye(6), np.zeros((6, 6)), 0.01))
    with pytest.raises(DimensionMismatch):
        propagate_covariance(cov, tb, CompressedAccumulator.reset(IMU_DIM))
