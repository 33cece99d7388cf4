import math

import numpy as np
import pytest

from pycmsckf.geom import Pose, UnitQuaternion
from pycmsckf.harness import RunConfig, run
from pycmsckf.scenario import Scenario
from pycmsckf.simulator import SensorConfig, TrajectorySpec
from pycmsckf.state import (
    Clone,
    ImuState,
    Keyframe,
    Partition,
    PartitionedCovariance,
    StateVector,
)
from pycmsckf.vision import PinholeCamera


def short_scenario(duration=10.0, seed=3, **filter_overrides):
    """
    80 m oval flown in 8 s, keyframes every 2 s
    """
    return Scenario(
        trajectory=TrajectorySpec(
            straight_length=20.0, turn_radius=20.0 / math.pi, speed=10.0, duration=duration
        ),
        sensors=SensorConfig(landmark_count=200),
        seed=seed,
        filter={"keyframe_interval": 2.0, "loop_min_age": 4.0, **filter_overrides},
    )


def random_pose(rng, spread=5.0):
    return Pose(
        UnitQuaternion.from_rotvec(rng.normal(0.0, 0.3, 3)), rng.uniform(-spread, spread, 3)
    )


def make_state(clone_poses=(), keyframe_poses=(), n_global=0, imu=None, max_clones=10):
    """
    StateVector with the given clones and keyframes; the last n_global
    keyframes are GLOBAL
    """
    n_local = len(keyframe_poses) - n_global
    clones = tuple(Clone(i, pose, 0.1 * (i + 1)) for i, pose in enumerate(clone_poses))
    keyframes = tuple(
        Keyframe(i, pose, 5.0 * i, Partition.LOCAL if i < n_local else Partition.GLOBAL)
        for i, pose in enumerate(keyframe_poses)
    )
    return StateVector(
        imu=imu if imu is not None else ImuState.at_rest(),
        clones=clones,
        keyframes=keyframes,
        max_clones=max_clones,
        next_clone_id=len(clones),
        next_keyframe_id=len(keyframes),
        last_keyframe_time=5.0 * (len(keyframes) - 1) if keyframes else 0.0,
    )


def random_covariance(rng, dim):
    A = rng.standard_normal((dim, dim))
    return A @ A.T / dim + 0.5 * np.eye(dim)


def random_filter(rng, n_clones=3, n_keyframes=3, n_global=0):
    state = make_state(
        [random_pose(rng) for _ in range(n_clones)],
        [random_pose(rng, 30.0) for _ in range(n_keyframes)],
        n_global,
        imu=ImuState(
            UnitQuaternion.from_rotvec(rng.normal(0.0, 0.3, 3)),
            rng.normal(0.0, 1e-3, 3),
            rng.normal(0.0, 5.0, 3),
            rng.normal(0.0, 1e-2, 3),
            rng.normal(0.0, 5.0, 3),
        ),
    )
    P = random_covariance(rng, state.error_dim)
    return state, PartitionedCovariance.from_full(P, state.local_dim)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def camera():
    return PinholeCamera()


@pytest.fixture(scope="session")
def lockstep_report():
    scenario = short_scenario(r_local=10.0, r_recenter=5.0)
    return run(RunConfig(mode="compressed", scenario=scenario, oracle_lockstep=True))


@pytest.fixture(scope="session")
def schmidt_lockstep_report():
    return run(RunConfig(mode="schmidt", scenario=short_scenario(), oracle_lockstep=True))
