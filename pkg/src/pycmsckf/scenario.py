"""
YAML scenario files: trajectory, sensor suite, seed and filter overrides.
"""

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from pycmsckf.errors import ConfigError, FilterError, IoError
from pycmsckf.estimator import FilterConfig
from pycmsckf.geom import Pose, UnitQuaternion
from pycmsckf.propagation import ImuNoiseParams
from pycmsckf.simulator import LandmarkRegion, SensorConfig, TrajectorySpec
from pycmsckf.vision import PinholeCamera

_LOGGER = logging.getLogger(__name__)

_FILTER_KEYS = {
    f.name for f in fields(FilterConfig) if f.name not in ("pixel_sigma", "gravity")
}


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except FilterError as err:
        raise ConfigError(f"{where}: {err}") from err
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


def _camera(data):
    if data is None:
        return PinholeCamera()
    data = dict(data)
    extrinsics = data.pop("extrinsics", None)
    for key in ("focal", "principal_point", "image_size"):
        if key in data:
            data[key] = tuple(data[key])
    if extrinsics is not None:
        try:
            data["extrinsics"] = Pose(
                UnitQuaternion(np.array(extrinsics["orientation"], dtype=float)),
                np.array(extrinsics["position"], dtype=float),
            )
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigError(f"sensors.camera.extrinsics: {err}") from err
    return _build(PinholeCamera, data, "sensors.camera")


def _sensors(data):
    data = dict(data or {})
    data["imu_noise"] = _build(ImuNoiseParams, data.get("imu_noise"), "sensors.imu_noise")
    data["camera"] = _camera(data.get("camera"))
    data["landmark_region"] = _build(
        LandmarkRegion, data.get("landmark_region"), "sensors.landmark_region"
    )
    return _build(SensorConfig, data, "sensors")


@dataclass
class Scenario:
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    sensors: SensorConfig = field(default_factory=SensorConfig)
    seed: int = 7
    filter: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.filter) - _FILTER_KEYS
        if unknown:
            raise ConfigError(f"filter: unknown keys {sorted(unknown)}")

    @classmethod
    def default(cls, duration=75.0):
        return cls(TrajectorySpec(duration=duration))

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("scenario file must hold a mapping")
        unknown = set(data) - {"seed", "trajectory", "sensors", "filter"}
        if unknown:
            raise ConfigError(f"unknown scenario keys {sorted(unknown)}")
        seed = data.get("seed", 7)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
        return cls(
            trajectory=_build(TrajectorySpec, data.get("trajectory"), "trajectory"),
            sensors=_sensors(data.get("sensors")),
            seed=seed,
            filter=dict(data.get("filter") or {}),
        )

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                data = yaml.safe_load(f)
        except OSError as err:
            raise IoError(f"cannot read scenario {path}: {err}") from err
        except yaml.YAMLError as err:
            raise ConfigError(f"malformed scenario {path}: {err}") from err
        _LOGGER.debug(f"loaded scenario {path}")
        return cls.from_dict(data)

    def to_dict(self):
        sensors = asdict(self.sensors)
        camera = self.sensors.camera
        sensors["camera"] = {
            "focal": list(camera.focal),
            "principal_point": list(camera.principal_point),
            "image_size": list(camera.image_size),
            "extrinsics": {
                "orientation": camera.extrinsics.orientation.wxyz.tolist(),
                "position": camera.extrinsics.position.tolist(),
            },
            "min_depth": camera.min_depth,
            "max_depth": camera.max_depth,
        }
        return {
            "seed": self.seed,
            "trajectory": asdict(self.trajectory),
            "sensors": sensors,
            "filter": dict(self.filter),
        }

    def save(self, path):
        try:
            with open(path, "w") as f:
                yaml.safe_dump(self.to_dict(), f, sort_keys=False)
        except OSError as err:
            raise IoError(f"cannot write scenario {path}: {err}") from err

    def filter_config(self, **overrides):
        """
        FilterConfig from the scenario's filter section, then overrides
        """
        values = {**self.filter, **{k: v for k, v in overrides.items() if v is not None}}
        return FilterConfig(pixel_sigma=self.sensors.pixel_sigma, **values)
