"""
Deterministic synthetic world: racetrack ground truth, landmark field and
IMU, camera and GPS streams.

Every random stream draws from ``np.random.default_rng([seed, stream, index])``
so a sample only depends on (seed, stream, index): streams can be generated
eagerly or one sample at a time with identical results.
"""

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from pycmsckf.errors import InvalidSpec, IoError
from pycmsckf.geom import Pose, UnitQuaternion
from pycmsckf.propagation import GRAVITY, ImuNoiseParams, ImuSample
from pycmsckf.state import POS, VEL, ImuState
from pycmsckf.vision import LinearizedBlock, PinholeCamera

_LOGGER = logging.getLogger(__name__)

IMU_STREAM = 1
CAMERA_STREAM = 2
GPS_STREAM = 3
LANDMARK_STREAM = 4
BIAS_STREAM = 5
INITIAL_STATE_STREAM = 6

# slack when mapping a timestamp onto a segment or sensor grid
_GRID_EPS = 1e-9


@dataclass(frozen=True)
class TrajectorySpec:
    """
    Oval track flown counter-clockwise at constant speed and altitude.

    The lap starts at the origin heading +x along the first straight; turn
    centres are (straight_length, turn_radius) and (0, turn_radius). An
    optional stationary hover at the origin precedes the first lap; leaving
    it is a velocity step.
    """

    straight_length: float = 100.0
    turn_radius: float = 100.0 / math.pi
    speed: float = 10.0
    duration: float = 75.0
    altitude: float = 5.0
    hover_duration: float = 0.0

    def __post_init__(self):
        for name in ("straight_length", "turn_radius", "speed", "duration", "altitude"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0.0:
                raise InvalidSpec(f"{name} must be positive, got {value}")
        if not self.hover_duration >= 0.0:
            raise InvalidSpec(f"hover_duration must be non-negative, got {self.hover_duration}")
        if self.duration - self.hover_duration < self.lap_period - _GRID_EPS:
            raise InvalidSpec(
                f"duration {self.duration}s is shorter than one lap ({self.lap_period:.3f}s)"
            )

    @property
    def lap_period(self):
        return (2.0 * self.straight_length + 2.0 * math.pi * self.turn_radius) / self.speed

    @property
    def segment_boundaries(self):
        straight = self.straight_length / self.speed
        turn = math.pi * self.turn_radius / self.speed
        return np.cumsum([0.0, straight, turn, straight, turn])


@dataclass(frozen=True)
class LandmarkRegion:
    """
    Band flanking the track: lateral offset [inner, outer] m on either side
    """

    inner: float = 5.0
    outer: float = 20.0
    z_min: float = 0.0
    z_max: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.inner < self.outer or not self.z_min <= self.z_max:
            raise InvalidSpec(f"bad landmark region {self}")


@dataclass(frozen=True)
class SensorConfig:
    imu_rate: float = 100.0
    cam_rate: float = 30.0
    gps_rate: float = 1.0
    imu_noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    initial_gyro_bias_sigma: float = 1e-4
    initial_accel_bias_sigma: float = 1e-3
    initial_attitude_sigma: float = 0.01
    initial_velocity_sigma: float = 0.1
    initial_position_sigma: float = 0.5
    pixel_sigma: float = 1.0
    gps_pos_sigma: float = 1.0
    gps_vel_sigma: float = 0.1
    camera: PinholeCamera = field(default_factory=PinholeCamera)
    landmark_count: int = 600
    landmark_region: LandmarkRegion = field(default_factory=LandmarkRegion)

    def __post_init__(self):
        if min(self.imu_rate, self.cam_rate, self.gps_rate) <= 0.0:
            raise InvalidSpec("sensor rates must be positive")
        if not self.imu_rate >= self.cam_rate >= self.gps_rate:
            raise InvalidSpec(
                f"rates must satisfy imu >= cam >= gps, got "
                f"{self.imu_rate}/{self.cam_rate}/{self.gps_rate}"
            )
        sigmas = (
            self.initial_gyro_bias_sigma,
            self.initial_accel_bias_sigma,
            self.initial_attitude_sigma,
            self.initial_velocity_sigma,
            self.initial_position_sigma,
            self.pixel_sigma,
            self.gps_pos_sigma,
            self.gps_vel_sigma,
        )
        if any(s < 0.0 for s in sigmas):
            raise InvalidSpec("noise sigmas must be non-negative")
        if self.landmark_count < 0:
            raise InvalidSpec("landmark_count must be non-negative")

    def initial_covariance(self):
        """
        Prior on the IMU error [dtheta, db_g, dv, db_a, dp]
        """
        sigmas = np.repeat(
            [
                self.initial_attitude_sigma,
                self.initial_gyro_bias_sigma,
                self.initial_velocity_sigma,
                self.initial_accel_bias_sigma,
                self.initial_position_sigma,
            ],
            3,
        )
        return np.diag(sigmas**2)


@dataclass(frozen=True, eq=False)
class TruthSample:
    timestamp: float
    attitude: UnitQuaternion
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    angular_rate: np.ndarray

    @property
    def pose(self):
        return Pose(self.attitude, self.position)

    def imu_state(self, gyro_bias=np.zeros(3), accel_bias=np.zeros(3)):
        return ImuState(self.attitude, gyro_bias, self.velocity, accel_bias, self.position)


def _yaw_attitude(yaw):
    # body-to-global is a yaw rotation; the attitude maps global into body
    return UnitQuaternion.from_rotvec([0.0, 0.0, -yaw])


def _kinematics(spec, t):
    """
    (position, velocity, acceleration, yaw, yaw_rate) at time t
    """
    z = spec.altitude
    if t < spec.hover_duration:
        return np.array([0.0, 0.0, z]), np.zeros(3), np.zeros(3), 0.0, 0.0

    v = spec.speed
    L = spec.straight_length
    R = spec.turn_radius
    w = v / R
    boundaries = spec.segment_boundaries
    phase = math.fmod(t - spec.hover_duration, spec.lap_period)
    segment = int(np.searchsorted(boundaries, phase + _GRID_EPS, side="right")) - 1
    segment = min(max(segment, 0), 3)
    s = phase - boundaries[segment]

    if segment == 0:
        return np.array([v * s, 0.0, z]), np.array([v, 0.0, 0.0]), np.zeros(3), 0.0, 0.0
    if segment == 2:
        return (
            np.array([L - v * s, 2.0 * R, z]),
            np.array([-v, 0.0, 0.0]),
            np.zeros(3),
            math.pi,
            0.0,
        )
    if segment == 1:
        center, theta0, yaw0 = np.array([L, R]), -0.5 * math.pi, 0.0
    else:
        center, theta0, yaw0 = np.array([0.0, R]), 0.5 * math.pi, math.pi
    theta = theta0 + w * s
    c, sn = math.cos(theta), math.sin(theta)
    position = np.array([center[0] + R * c, center[1] + R * sn, z])
    velocity = np.array([-v * sn, v * c, 0.0])
    acceleration = np.array([-w * w * R * c, -w * w * R * sn, 0.0])
    return position, velocity, acceleration, yaw0 + w * s, w


@dataclass(eq=False)
class GroundTruth:
    spec: TrajectorySpec
    timestamps: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    accelerations: np.ndarray
    yaws: np.ndarray
    angular_rates: np.ndarray
    landmarks: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def at(self, t):
        """
        Exact ground truth at any time in [0, duration]
        """
        p, v, a, yaw, rate = _kinematics(self.spec, t)
        return TruthSample(t, _yaw_attitude(yaw), p, v, a, np.array([0.0, 0.0, rate]))

    def __len__(self):
        return len(self.timestamps)


def _grid(duration, rate):
    n = int(math.floor(duration * rate + _GRID_EPS)) + 1
    return np.arange(n) / rate


def generate_trajectory(spec, dt=0.01):
    if not 0.0 < dt <= 0.01 + _GRID_EPS:
        raise InvalidSpec(f"trajectory step must be in (0, 0.01], got {dt}")
    timestamps = _grid(spec.duration, 1.0 / dt)
    rows = [_kinematics(spec, t) for t in timestamps]
    return GroundTruth(
        spec=spec,
        timestamps=timestamps,
        positions=np.array([r[0] for r in rows]),
        velocities=np.array([r[1] for r in rows]),
        accelerations=np.array([r[2] for r in rows]),
        yaws=np.array([r[3] for r in rows]),
        angular_rates=np.array([[0.0, 0.0, r[4]] for r in rows]),
    )


def generate_landmarks(spec, config, seed):
    """
    Uniform landmark field in the band on both sides of one lap
    """
    rng = np.random.default_rng([seed, LANDMARK_STREAM])
    n = config.landmark_count
    region = config.landmark_region
    along = rng.uniform(0.0, spec.lap_period, n)
    side = rng.choice([-1.0, 1.0], n)
    offset = rng.uniform(region.inner, region.outer, n)
    z = rng.uniform(region.z_min, region.z_max, n)

    landmarks = np.zeros((n, 3))
    for i in range(n):
        p, v, _, _, _ = _kinematics(spec, spec.hover_duration + along[i])
        heading = v[:2] / np.linalg.norm(v[:2])
        normal = np.array([-heading[1], heading[0]])
        landmarks[i, :2] = p[:2] + side[i] * offset[i] * normal
        landmarks[i, 2] = z[i]
    return landmarks


@dataclass(eq=False)
class ImuStream:
    samples: list
    gyro_bias: np.ndarray
    accel_bias: np.ndarray

    @property
    def timestamps(self):
        return np.array([s.timestamp for s in self.samples])


def initial_biases(config, seed):
    rng = np.random.default_rng([seed, BIAS_STREAM])
    return (
        rng.normal(0.0, config.initial_gyro_bias_sigma, 3),
        rng.normal(0.0, config.initial_accel_bias_sigma, 3),
    )


def synthesize_imu(gt, config, seed):
    """
    Measured specific force and angular rate with white noise and random-walk
    biases, sampled at imu_rate over the whole trajectory
    """
    noise = config.imu_noise
    dt = 1.0 / config.imu_rate
    sigma_g = noise.gyro_noise_density / math.sqrt(dt)
    sigma_a = noise.accel_noise_density / math.sqrt(dt)
    walk_g = noise.gyro_bias_walk * math.sqrt(dt)
    walk_a = noise.accel_bias_walk * math.sqrt(dt)

    b_g, b_a = initial_biases(config, seed)
    samples = []
    gyro_bias = []
    accel_bias = []
    for i, t in enumerate(_grid(gt.spec.duration, config.imu_rate)):
        truth = gt.at(t)
        draw = np.random.default_rng([seed, IMU_STREAM, i]).standard_normal(12)
        if i:
            b_g = b_g + walk_g * draw[6:9]
            b_a = b_a + walk_a * draw[9:12]
        C = truth.attitude.matrix
        accel = C @ (truth.acceleration - GRAVITY) + b_a + sigma_a * draw[3:6]
        gyro = truth.angular_rate + b_g + sigma_g * draw[0:3]
        samples.append(ImuSample(t, accel, gyro))
        gyro_bias.append(b_g)
        accel_bias.append(b_a)
    return ImuStream(samples, np.array(gyro_bias), np.array(accel_bias))


def camera_times(spec, config):
    # the last frame is strictly before the end of the run
    n = int(math.ceil(spec.duration * config.cam_rate - _GRID_EPS))
    return np.arange(n) / config.cam_rate


def synthesize_camera(gt, config, seed, t):
    """
    {feature_id: pixel} of every landmark inside the image and depth range at t
    """
    k = int(round(t * config.cam_rate))
    camera = config.camera
    landmarks = gt.landmarks
    draw = np.random.default_rng([seed, CAMERA_STREAM, k]).standard_normal((len(landmarks), 2))
    if not len(landmarks):
        return {}

    p_c = camera.to_camera(gt.at(t).pose, landmarks)
    with np.errstate(divide="ignore", invalid="ignore"):
        pixels = camera.project(p_c)
    visible = camera.visible(p_c, pixels)
    pixels = pixels + config.pixel_sigma * draw
    return {int(fid): pixels[fid] for fid in np.flatnonzero(visible)}


@dataclass(frozen=True, eq=False)
class GpsFix:
    timestamp: float
    position: np.ndarray
    velocity: np.ndarray
    pos_sigma: float
    vel_sigma: float


def gps_times(spec, config):
    # no fix at t = 0, the prior already holds the initial uncertainty
    return _grid(spec.duration, config.gps_rate)[1:]


def synthesize_gps(gt, config, seed, t):
    j = int(round(t * config.gps_rate))
    draw = np.random.default_rng([seed, GPS_STREAM, j]).standard_normal(6)
    truth = gt.at(t)
    return GpsFix(
        t,
        truth.position + config.gps_pos_sigma * draw[:3],
        truth.velocity + config.gps_vel_sigma * draw[3:],
        config.gps_pos_sigma,
        config.gps_vel_sigma,
    )


def gps_update_block(fix, state, width=None):
    """
    Direct position and velocity measurement of the IMU state
    """
    if width is None:
        width = state.local_dim
    H = np.zeros((6, width))
    H[0:3, POS] = np.eye(3)
    H[3:6, VEL] = np.eye(3)
    residual = np.concatenate(
        [fix.position - state.imu.position, fix.velocity - state.imu.velocity]
    )
    noise_cov = np.diag(np.repeat([fix.pos_sigma**2, fix.vel_sigma**2], 3))
    return LinearizedBlock(H, residual, noise_cov)


def initial_estimate(gt, config, seed, t0=0.0):
    """
    Truth at t0 perturbed by one draw from the prior; biases start at zero
    """
    truth = gt.at(t0)
    P0 = config.initial_covariance()
    draw = np.random.default_rng([seed, INITIAL_STATE_STREAM]).standard_normal(15)
    err = np.sqrt(np.diag(P0)) * draw
    imu = ImuState(
        UnitQuaternion.from_rotvec(-err[0:3]) * truth.attitude,
        np.zeros(3),
        truth.velocity - err[6:9],
        np.zeros(3),
        truth.position - err[12:15],
    )
    return imu, P0


def export_streams(out_dir, gt, imu, frames, fixes):
    """
    Write imu.csv, camera.csv, gps.csv and landmarks.csv into out_dir.

    frames is a sequence of (timestamp, {feature_id: pixel}).
    """
    imu_df = pd.DataFrame(
        {
            "timestamp": [s.timestamp for s in imu.samples],
            **{f"accel_{a}": [s.accel[i] for s in imu.samples] for i, a in enumerate("xyz")},
            **{f"gyro_{a}": [s.gyro[i] for s in imu.samples] for i, a in enumerate("xyz")},
        }
    )
    camera_df = pd.DataFrame(
        [(t, fid, px[0], px[1]) for t, obs in frames for fid, px in obs.items()],
        columns=["timestamp", "feature_id", "u", "v"],
    )
    gps_df = pd.DataFrame(
        [(f.timestamp, *f.position, *f.velocity) for f in fixes],
        columns=["timestamp", "x", "y", "z", "vx", "vy", "vz"],
    )
    landmark_df = pd.DataFrame(gt.landmarks, columns=["x", "y", "z"])
    landmark_df.index.name = "feature_id"

    try:
        os.makedirs(out_dir, exist_ok=True)
        imu_df.to_csv(os.path.join(out_dir, "imu.csv"), index=False)
        camera_df.to_csv(os.path.join(out_dir, "camera.csv"), index=False)
        gps_df.to_csv(os.path.join(out_dir, "gps.csv"), index=False)
        landmark_df.to_csv(os.path.join(out_dir, "landmarks.csv"))
    except OSError as err:
        raise IoError(f"cannot write streams to {out_dir}: {err}") from err
    _LOGGER.info(f"wrote {len(imu.samples)} IMU, {len(frames)} camera, {len(fixes)} GPS rows")
