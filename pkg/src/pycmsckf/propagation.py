"""
IMU time update: mean integration, transition Jacobian and discrete noise,
and covariance propagation with the local-global cross term optionally
deferred into a CompressedAccumulator.

Each IMU sample is held constant over the interval that follows it.
Attitude is integrated with the exact exponential, velocity and position with
RK4; `compute_transition` is the Jacobian of exactly that discrete map.
"""

from dataclasses import dataclass

import numpy as np

from pycmsckf.errors import DimensionMismatch, FilterError, InvalidSpec, NonPositiveDt
from pycmsckf.geom import UnitQuaternion, left_jacobian, quat_compose, skew, so3_exp
from pycmsckf.state import ATT, BA, BG, IMU_DIM, POS, VEL, ImuState, PartitionedCovariance, symmetrize

GRAVITY = np.array([0.0, 0.0, -9.81])
MAX_DT = 0.1


@dataclass(frozen=True, eq=False)
class ImuSample:
    timestamp: float
    accel: np.ndarray
    gyro: np.ndarray


@dataclass(frozen=True)
class ImuNoiseParams:
    """
    Continuous-time densities: gyro [rad/s/sqrt(Hz)], accel [m/s^2/sqrt(Hz)],
    bias random walks [rad/s^2/sqrt(Hz)], [m/s^3/sqrt(Hz)].

    Zero densities are accepted for noise-free simulation.
    """

    gyro_noise_density: float = 1e-3
    accel_noise_density: float = 1e-2
    gyro_bias_walk: float = 1e-5
    accel_bias_walk: float = 1e-4

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not np.isfinite(value) or value < 0.0:
                raise InvalidSpec(f"{name} must be a non-negative number, got {value}")

    @classmethod
    def noiseless(cls):
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass(eq=False)
class TransitionBlock:
    """
    J and Q of the 15-dim IMU error; clones and keyframes map through identity
    """

    J: np.ndarray
    Q: np.ndarray
    dt: float

    def expand(self, dim):
        J = np.eye(dim)
        J[:IMU_DIM, :IMU_DIM] = self.J
        Q = np.zeros((dim, dim))
        Q[:IMU_DIM, :IMU_DIM] = self.Q
        return J, Q


def _check_dt(dt):
    if not dt > 0.0:
        raise NonPositiveDt(f"dt must be positive, got {dt}")
    if dt > MAX_DT:
        raise FilterError(f"dt {dt}s exceeds the {MAX_DT}s integration limit")


def _rates(imu, sample):
    return sample.gyro - imu.gyro_bias, sample.accel - imu.accel_bias


def propagate_mean(imu, sample, dt, gravity=GRAVITY):
    _check_dt(dt)
    w, f = _rates(imu, sample)

    C0 = imu.attitude.matrix
    Ch = so3_exp(-0.5 * dt * w) @ C0
    attitude = quat_compose(UnitQuaternion.from_rotvec(-dt * w), imu.attitude)
    C1 = attitude.matrix

    a0 = C0.T @ f + gravity
    ah = Ch.T @ f + gravity
    a1 = C1.T @ f + gravity

    velocity = imu.velocity + dt / 6.0 * (a0 + 4.0 * ah + a1)
    position = imu.position + dt * imu.velocity + dt * dt / 6.0 * (a0 + 2.0 * ah)
    return ImuState(attitude, imu.gyro_bias, velocity, imu.accel_bias, position)


def compute_transition(imu, sample, dt, noise, gravity=GRAVITY):
    _check_dt(dt)
    w, f = _rates(imu, sample)
    C0 = imu.attitude.matrix
    F = skew(f)

    d_att = {}
    d_bg = {}
    d_ba = {}
    for key, tau in (("0", 0.0), ("h", 0.5 * dt), ("1", dt)):
        R_tau = so3_exp(-tau * w)
        Ct = (R_tau @ C0).T
        d_att[key] = Ct @ F @ R_tau
        d_bg[key] = tau * (Ct @ F @ left_jacobian(-tau * w))
        d_ba[key] = -Ct

    def simpson(d):
        return dt / 6.0 * (d["0"] + 4.0 * d["h"] + d["1"])

    def position_weights(d):
        return dt * dt / 6.0 * (d["0"] + 2.0 * d["h"])

    J = np.eye(IMU_DIM)
    J[ATT, ATT] = so3_exp(-dt * w)
    J[ATT, BG] = dt * left_jacobian(-dt * w)
    J[VEL, ATT] = simpson(d_att)
    J[VEL, BG] = simpson(d_bg)
    J[VEL, BA] = simpson(d_ba)
    J[POS, ATT] = position_weights(d_att)
    J[POS, BG] = position_weights(d_bg)
    J[POS, BA] = position_weights(d_ba)
    J[POS, VEL] = dt * np.eye(3)

    # white measurement noise enters exactly like the bias errors
    G_g = J[:, BG].copy()
    G_g[BG, :] = 0.0
    G_a = J[:, BA].copy()
    G_a[BA, :] = 0.0

    Q = (noise.gyro_noise_density**2 / dt) * (G_g @ G_g.T)
    Q += (noise.accel_noise_density**2 / dt) * (G_a @ G_a.T)
    Q[BG, BG] += noise.gyro_bias_walk**2 * dt * np.eye(3)
    Q[BA, BA] += noise.accel_bias_walk**2 * dt * np.eye(3)
    return TransitionBlock(J, symmetrize(Q), dt)


def propagate_covariance(cov, tb, accumulator=None):
    """
    P_LL := Jbar P_LL Jbar' + blkdiag(Q, 0) with Jbar = blkdiag(J, I).

    With an accumulator P_LG and P_GG are left alone and T := Jbar T;
    without one the P_LG rows of the IMU block are propagated directly.
    """
    if tb.J.shape != (IMU_DIM, IMU_DIM) or tb.Q.shape != (IMU_DIM, IMU_DIM):
        raise DimensionMismatch(f"transition block must be {IMU_DIM}x{IMU_DIM}")
    if cov.local_dim < IMU_DIM:
        raise DimensionMismatch(f"local block of size {cov.local_dim} has no IMU state")

    imu = slice(0, IMU_DIM)
    P = cov.P_LL.copy()
    P[imu, :] = tb.J @ P[imu, :]
    P[:, imu] = P[:, imu] @ tb.J.T
    P[imu, imu] += tb.Q
    P = symmetrize(P)

    if accumulator is None:
        P_LG = cov.P_LG.copy()
        P_LG[imu, :] = tb.J @ P_LG[imu, :]
    else:
        if accumulator.local_dim != cov.local_dim:
            raise DimensionMismatch(
                f"accumulator has {accumulator.local_dim} local rows, covariance {cov.local_dim}"
            )
        P_LG = cov.P_LG
        accumulator.propagate(tb.J, imu)
    return PartitionedCovariance(P, P_LG, cov.P_GG), accumulator
