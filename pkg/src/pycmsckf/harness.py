"""
Experiment driver: wires the simulator into an estimator back-end, runs the
dense lockstep twin, computes accuracy, consistency and cost metrics and
writes the report files.
"""

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
import yaml

from pycmsckf.accumulator import CompressedAccumulator
from pycmsckf.backends import BACKENDS
from pycmsckf.backends.full import FullEstimator
from pycmsckf.errors import ConfigError, FilterError, IoError, MismatchedScenarios, SingularMarginal
from pycmsckf.estimator import GPS, LOOP, PROMOTE, RECENTER, RECOVERY, resolve_backend
from pycmsckf.geom import Pose, UnitQuaternion, boxminus
from pycmsckf.scenario import Scenario
from pycmsckf.simulator import (
    camera_times,
    generate_landmarks,
    generate_trajectory,
    gps_times,
    initial_estimate,
    synthesize_camera,
    synthesize_gps,
    synthesize_imu,
)
from pycmsckf.state import (
    IMU_DIM,
    Clone,
    ImuState,
    Keyframe,
    Partition,
    PartitionedCovariance,
    StateVector,
    covariance_health,
    snapshot_rows,
    state_difference,
    symmetrize,
)
from pycmsckf.updates import (
    compressed_update,
    compressed_update_flops,
    dense_update_flops,
    full_update,
    recovery_flops,
)
from pycmsckf.vision import LinearizedBlock

_LOGGER = logging.getLogger(__name__)

# ImuState.to_vector order
IMU_FIELDS = [
    "qw",
    "qx",
    "qy",
    "qz",
    "bgx",
    "bgy",
    "bgz",
    "vx",
    "vy",
    "vz",
    "bax",
    "bay",
    "baz",
    "px",
    "py",
    "pz",
]
ESTIMATE_COLUMNS = [f"est_{name}" for name in IMU_FIELDS]
TRUTH_COLUMNS = [f"true_{name}" for name in IMU_FIELDS]
# 3-sigma of the IMU position
POSITION_SIGMA_COLUMNS = ["sigma3_px", "sigma3_py", "sigma3_pz"]

STEP_COLUMNS = [
    "step",
    "timestamp",
    *ESTIMATE_COLUMNS,
    *TRUTH_COLUMNS,
    "position_error",
    "attitude_error_deg",
    "nees",
    *POSITION_SIGMA_COLUMNS,
    "state_dim",
    "local_dim",
    "keyframes",
    "global_keyframes",
    "tracks",
    "blocks",
    "flops",
    "events",
    "mean_divergence",
    "cov_divergence",
    "schmidt_margin",
]

KEYFRAME_COLUMNS = [
    "timestamp",
    "keyframe_id",
    "partition",
    "x",
    "y",
    "z",
    "sigma3_roll",
    "sigma3_pitch",
    "sigma3_yaw",
    "sigma3_x",
    "sigma3_y",
    "sigma3_z",
]

TIMING_COLUMNS = ["step", "timestamp", "wall_time"]

_CSV_READ = dict(float_precision="round_trip", keep_default_na=False, na_values=["nan"])


@dataclass
class RunConfig:
    mode: str = "compressed"
    scenario: object = None
    seed: int = None
    keyframe_interval: float = None
    r_local: float = None
    r_recenter: float = None
    n_clones: int = None
    out_dir: str = None
    oracle_lockstep: bool = False

    def validate(self):
        if self.mode not in BACKENDS:
            raise ConfigError(f"unknown mode {self.mode!r}, expected one of {sorted(BACKENDS)}")
        if isinstance(self.scenario, str) and not os.path.exists(self.scenario):
            raise ConfigError(f"scenario {self.scenario} does not exist")
        if self.seed is not None and (not isinstance(self.seed, int) or self.seed < 0):
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")

    def load_scenario(self):
        if self.scenario is None:
            return Scenario.default()
        if isinstance(self.scenario, Scenario):
            return self.scenario
        return Scenario.load(self.scenario)

    def filter_overrides(self):
        return dict(
            keyframe_interval=self.keyframe_interval,
            r_local=self.r_local,
            r_recenter=self.r_recenter,
            n_clones=self.n_clones,
        )


@dataclass(eq=False)
class RunReport:
    config: RunConfig
    rows: list = field(default_factory=list)
    keyframe_rows: list = field(default_factory=list)
    timing: list = field(default_factory=list)
    estimates: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def steps(self):
        return pd.DataFrame(self.rows, columns=STEP_COLUMNS)

    def keyframes(self):
        return pd.DataFrame(self.keyframe_rows, columns=KEYFRAME_COLUMNS)


@dataclass(eq=False)
class World:
    scenario: Scenario
    seed: int
    truth: object
    imu: object

    def frames(self):
        sensors = self.scenario.sensors
        gps = {round(t * sensors.gps_rate): t for t in gps_times(self.truth.spec, sensors)}
        for t in camera_times(self.truth.spec, sensors):
            observations = synthesize_camera(self.truth, sensors, self.seed, t)
            fix = None
            j = round(t * sensors.gps_rate)
            if j in gps and abs(gps[j] - t) < 1e-9:
                fix = synthesize_gps(self.truth, sensors, self.seed, t)
            yield t, observations, fix

    def true_imu_state(self, t):
        """
        True IMU state at t, biases taken from the simulated random walk
        """
        i = min(int(round(t * self.scenario.sensors.imu_rate)), len(self.imu.samples) - 1)
        return self.truth.at(t).imu_state(self.imu.gyro_bias[i], self.imu.accel_bias[i])


def build_world(scenario, seed):
    sensors = scenario.sensors
    truth = generate_trajectory(scenario.trajectory, 1.0 / sensors.imu_rate)
    truth.landmarks = generate_landmarks(scenario.trajectory, sensors, seed)
    imu = synthesize_imu(truth, sensors, seed)
    return World(scenario, seed, truth, imu)


def _pose_error(truth_pose, estimate):
    return boxminus(truth_pose, estimate)


def _nees(err, P):
    try:
        L = np.linalg.cholesky(symmetrize(P))
    except np.linalg.LinAlgError as exc:
        raise SingularMarginal("pose marginal is not positive definite") from exc
    z = np.linalg.solve(L, err)
    return float(z @ z)


def compute_nees(estimates, truth):
    """
    NEES of the 6-DoF pose marginal at every step and its average.

    estimates holds (timestamp, Pose, 6x6 covariance); truth is either a
    GroundTruth or a sequence of true Poses aligned with estimates.
    """
    values = []
    for i, (t, pose, P) in enumerate(estimates):
        true_pose = truth.at(t).pose if hasattr(truth, "at") else truth[i]
        values.append(_nees(_pose_error(true_pose, pose), P))
    values = np.array(values)
    return values, float(values.mean()) if len(values) else float("nan")


def _divergence(primary, oracle):
    mean = np.max(np.abs(state_difference(primary.state_view(), oracle.state_view())))
    P_primary = primary.covariance_view()
    P_oracle = oracle.covariance_view()
    cov = np.max(np.abs(P_primary - P_oracle))
    margin = float("nan")
    if primary.name == "schmidt":
        margin = np.linalg.eigvalsh(symmetrize(P_primary - P_oracle)).min() / np.trace(P_oracle)
    return float(mean), float(cov), float(margin)


def run(config):
    """
    Run one estimator over one simulated scenario and collect a RunReport
    """
    config.validate()
    scenario = config.load_scenario()
    seed = config.seed if config.seed is not None else scenario.seed
    world = build_world(scenario, seed)
    sensors = scenario.sensors
    filter_config = scenario.filter_config(**config.filter_overrides())

    imu0, P0 = initial_estimate(world.truth, sensors, seed)
    args = (filter_config, sensors.camera, sensors.imu_noise, imu0, P0, 0.0)
    estimator = resolve_backend(config.mode)(*args, record=config.oracle_lockstep)
    oracle = FullEstimator(*args, replay=True) if config.oracle_lockstep else None
    _LOGGER.info(f"running {config.mode} on {scenario.trajectory} with seed {seed}")

    report = RunReport(config)
    samples = world.imu.samples
    next_sample = 0
    for step, (t, observations, fix) in enumerate(world.frames()):
        end = next_sample
        while end < len(samples) and samples[end].timestamp <= t:
            end += 1
        tic = time.perf_counter()
        try:
            result = estimator.process_frame(t, samples[next_sample:end], observations, fix)
        except FilterError as err:
            err.step = step
            raise
        report.timing.append({"step": step, "timestamp": t, "wall_time": time.perf_counter() - tic})
        next_sample = end

        divergence = (float("nan"),) * 3
        if oracle is not None:
            oracle.replay(estimator.drain_journal())
            divergence = _divergence(estimator, oracle)
        _record(report, step, t, estimator, world, result, divergence)

    events, flops = estimator.finish()
    if report.rows and events:
        last = report.rows[-1]
        last["events"] = "|".join(filter(None, [last["events"], *events]))
        last["flops"] += flops
        t = last["timestamp"]
        report.keyframe_rows = [r for r in report.keyframe_rows if r["timestamp"] != t]
        report.keyframe_rows.extend(snapshot_rows(estimator.state, estimator.cov, t))
        if oracle is not None:
            oracle.replay(estimator.drain_journal())
            last["mean_divergence"], last["cov_divergence"], last["schmidt_margin"] = _divergence(
                estimator, oracle
            )

    report.summary = summarize(report, estimator, seed)
    if report.summary["final_cov_min_eig"] < 0.0:
        _LOGGER.warning(
            f"{config.mode}: final covariance is indefinite "
            f"(min eigenvalue / trace {report.summary['final_cov_min_eig']:.3e})"
        )
    _LOGGER.info(
        f"{config.mode} finished: {report.summary['keyframes']} keyframes, "
        f"RMSE {report.summary['rmse_position']:.3f} m"
    )
    if config.out_dir is not None:
        export(report, config.out_dir)
    return report


def _record(report, step, t, estimator, world, result, divergence):
    state = estimator.state
    true_imu = world.true_imu_state(t)
    estimate = state.imu.pose
    P = estimator.pose_covariance()
    err = _pose_error(true_imu.pose, estimate)
    report.estimates.append((t, estimate, P))
    report.rows.append(
        {
            "step": step,
            "timestamp": t,
            **dict(zip(ESTIMATE_COLUMNS, state.imu.to_vector().tolist())),
            **dict(zip(TRUTH_COLUMNS, true_imu.to_vector().tolist())),
            "position_error": float(np.linalg.norm(err[3:])),
            "attitude_error_deg": float(np.degrees(np.linalg.norm(err[:3]))),
            "nees": _nees(err, P),
            **dict(zip(POSITION_SIGMA_COLUMNS, (3.0 * np.sqrt(np.diag(P)[3:])).tolist())),
            "state_dim": state.error_dim,
            "local_dim": state.local_dim,
            "keyframes": len(state.keyframes),
            "global_keyframes": len(state.global_keyframes),
            "tracks": result.tracks_processed,
            "blocks": result.blocks_accepted,
            "flops": float(result.flops),
            "events": "|".join(result.events),
            "mean_divergence": divergence[0],
            "cov_divergence": divergence[1],
            "schmidt_margin": divergence[2],
        }
    )
    report.keyframe_rows.extend(snapshot_rows(state, estimator.cov, t))


def _event_times(steps, event):
    mask = steps["events"].str.split("|").apply(lambda tags: event in tags)
    return steps.loc[mask, "timestamp"].to_numpy()


def _finite_max(values):
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    return float(values.max()) if len(values) else None


def summarize(report, estimator, seed):
    steps = report.steps()
    recenters = _event_times(steps, RECENTER)
    periods = np.diff(recenters)
    margin = steps["schmidt_margin"].to_numpy(dtype=float)
    margin = margin[np.isfinite(margin)]
    wall = np.array([t["wall_time"] for t in report.timing])
    asymmetry, min_eig = covariance_health(estimator.covariance_view())
    return {
        "mode": report.config.mode,
        "seed": int(seed),
        "steps": int(len(steps)),
        "rmse_position": float(np.sqrt(np.mean(steps["position_error"] ** 2))) if len(steps) else None,
        "rmse_attitude_deg": float(np.sqrt(np.mean(steps["attitude_error_deg"] ** 2)))
        if len(steps)
        else None,
        "mean_nees": float(steps["nees"].mean()) if len(steps) else None,
        "keyframes": len(estimator.state.keyframes),
        "recoveries": int(len(_event_times(steps, RECOVERY))),
        "recenters": int(len(recenters)),
        "mean_recenter_period": float(periods.mean()) if len(periods) else None,
        "promotions": int(len(_event_times(steps, PROMOTE))),
        "loop_closures": int(len(_event_times(steps, LOOP))),
        "gps_updates": int(len(_event_times(steps, GPS))),
        "peak_state_dim": int(steps["state_dim"].max()) if len(steps) else IMU_DIM,
        "total_flops": float(steps["flops"].sum()),
        "mean_step_time": float(wall.mean()) if len(wall) else None,
        "max_mean_divergence": _finite_max(steps["mean_divergence"]),
        "max_cov_divergence": _finite_max(steps["cov_divergence"]),
        "schmidt_min_margin": float(margin.min()) if len(margin) else None,
        "final_cov_asymmetry": float(asymmetry),
        "final_cov_min_eig": float(min_eig),
    }


def export(report, out_dir):
    """
    Write steps.csv, keyframes.csv, timing.csv and summary.yaml into out_dir
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
        report.steps().to_csv(os.path.join(out_dir, "steps.csv"), index=False, na_rep="nan")
        report.keyframes().to_csv(os.path.join(out_dir, "keyframes.csv"), index=False, na_rep="nan")
        pd.DataFrame(report.timing, columns=TIMING_COLUMNS).to_csv(
            os.path.join(out_dir, "timing.csv"), index=False, na_rep="nan"
        )
        summary = {k: v for k, v in report.summary.items() if k != "mean_step_time"}
        with open(os.path.join(out_dir, "summary.yaml"), "w") as f:
            yaml.safe_dump(summary, f, sort_keys=False)
    except OSError as err:
        raise IoError(f"cannot write report to {out_dir}: {err}") from err
    _LOGGER.info(f"report written to {out_dir}")


def _read_csv(path, columns):
    try:
        df = pd.read_csv(path, **_CSV_READ)
    except OSError as err:
        raise IoError(f"cannot read {path}: {err}") from err
    if list(df.columns) != columns:
        raise IoError(f"{path} has columns {list(df.columns)}, expected {columns}")
    return df


def load_steps(path):
    return _read_csv(path, STEP_COLUMNS)


def load_keyframes(path):
    return _read_csv(path, KEYFRAME_COLUMNS)


def _scenario_key(config):
    scenario = config.load_scenario()
    seed = config.seed if config.seed is not None else scenario.seed
    return yaml.safe_dump(scenario.to_dict()), seed


def _run_all(configs, jobs):
    if jobs > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run, configs))
    return [run(c) for c in configs]


COMPARISON_COLUMNS = [
    "mode",
    "rmse_position",
    "rmse_attitude_deg",
    "mean_nees",
    "mean_step_time",
    "peak_state_dim",
    "keyframes",
    "recoveries",
    "max_mean_divergence",
    "max_cov_divergence",
    "schmidt_min_margin",
]


def compare_backends(configs, jobs=1):
    """
    Run every config on the same scenario and seed; returns (table, reports)
    """
    configs = list(configs)
    for c in configs:
        c.validate()
    keys = {_scenario_key(c) for c in configs}
    if len(keys) > 1:
        raise MismatchedScenarios("configs differ in scenario or seed")
    reports = _run_all(configs, jobs)
    table = pd.DataFrame(
        [{k: r.summary.get(k) for k in COMPARISON_COLUMNS} for r in reports],
        columns=COMPARISON_COLUMNS,
    )
    return table, reports


def monte_carlo(config, seeds, jobs=1):
    """
    One run per seed; the table carries per-seed NEES and RMSE, its attrs the
    average NEES over all runs
    """
    configs = [replace(config, seed=int(s), out_dir=None) for s in seeds]
    reports = _run_all(configs, jobs)
    table = pd.DataFrame(
        [
            {
                "seed": r.summary["seed"],
                "mean_nees": r.summary["mean_nees"],
                "rmse_position": r.summary["rmse_position"],
            }
            for r in reports
        ]
    )
    table.attrs["mean_nees"] = float(table["mean_nees"].mean()) if len(table) else float("nan")
    return table


def _random_pose(rng, spread):
    return Pose(UnitQuaternion.from_rotvec(rng.normal(0.0, 0.3, 3)), rng.uniform(-spread, spread, 3))


def synthetic_filter(n_global, n_clones=10, n_local_keyframes=2, seed=0):
    """
    Random well-conditioned filter state with the given partition sizes
    """
    rng = np.random.default_rng([seed, n_global])
    clones = tuple(Clone(i, _random_pose(rng, 10.0), 0.1 * (i + 1)) for i in range(n_clones))
    keyframes = tuple(
        Keyframe(
            i,
            _random_pose(rng, 50.0),
            5.0 * i,
            Partition.LOCAL if i < n_local_keyframes else Partition.GLOBAL,
        )
        for i in range(n_local_keyframes + n_global)
    )
    state = StateVector(
        imu=ImuState.at_rest(),
        clones=clones,
        keyframes=keyframes,
        max_clones=n_clones + 1,
        next_clone_id=n_clones,
        next_keyframe_id=len(keyframes),
    )
    dim = state.error_dim
    A = rng.standard_normal((dim, dim))
    P = A @ A.T / dim + np.eye(dim)
    return state, PartitionedCovariance.from_full(P, state.local_dim)


def synthetic_block(state, rows, seed=0):
    rng = np.random.default_rng([seed, rows, state.local_dim])
    return LinearizedBlock(
        rng.standard_normal((rows, state.local_dim)), rng.standard_normal(rows), np.eye(rows)
    )


def _median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        tic = time.perf_counter()
        fn()
        times.append(time.perf_counter() - tic)
    return float(np.median(times))


def scaling_table(global_counts=(5, 10, 20, 40, 80), rows=40, n_clones=10, repeats=5):
    """
    Flop estimates and median wall time of one dense and one compressed
    update as the number of GLOBAL keyframes grows, local size held fixed.

    attrs carries the fitted log-log exponents against the total dimension.
    """
    table = []
    for n_global in global_counts:
        state, cov = synthetic_filter(n_global, n_clones)
        block = synthetic_block(state, rows)
        dL, dim = state.local_dim, state.error_dim

        def compressed():
            compressed_update(state, cov, block, CompressedAccumulator.reset(dL))

        table.append(
            {
                "global_keyframes": n_global,
                "local_dim": dL,
                "total_dim": dim,
                "dense_flops": dense_update_flops(dim, rows),
                "compressed_flops": compressed_update_flops(dL, rows),
                "recovery_flops": recovery_flops(dL, dL, state.global_dim),
                "dense_time": _median_time(lambda: full_update(state, cov, block), repeats),
                "compressed_time": _median_time(compressed, repeats),
            }
        )
    table = pd.DataFrame(table)
    log_dim = np.log(table["total_dim"].to_numpy(dtype=float))
    if len(table) > 1:
        table.attrs["dense_exponent"] = float(np.polyfit(log_dim, np.log(table["dense_flops"]), 1)[0])
        table.attrs["compressed_exponent"] = float(
            np.polyfit(log_dim, np.log(table["compressed_flops"]), 1)[0]
        )
    return table
