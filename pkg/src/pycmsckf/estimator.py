"""
Per-frame filter policy shared by every back-end, plus the operation journal
the dense twin replays.
"""

import logging
from dataclasses import dataclass, field, replace
from threading import RLock

import numpy as np

import pycmsckf.backends
from pycmsckf.errors import (
    ConfigError,
    RankDeficientFeature,
    SingularInnovation,
    TriangulationError,
)
from pycmsckf.propagation import GRAVITY, ImuNoiseParams, compute_transition, propagate_covariance, propagate_mean
from pycmsckf.simulator import gps_update_block
from pycmsckf.state import (
    CLONE,
    DEFAULT_KEYFRAME_INTERVAL,
    DEFAULT_N_CLONES,
    DEFAULT_R_LOCAL,
    IMU_POSE_INDEX,
    Partition,
    augment_clone,
    augment_keyframe,
    clone_ref,
    initial_covariance,
    initial_state,
    keyframe_ref,
    marginalize_clones,
)
from pycmsckf.vision import (
    DEFAULT_GATE_QUANTILE,
    DEFAULT_MIN_PARALLAX_DEG,
    FeatureTrack,
    build_feature_block,
    build_keyframe_constraint,
    chi2_gate,
    compress_block,
    stack_blocks,
)

# step events
KF_ADDED = "KF_ADDED"
GPS = "GPS"
RECOVERY = "RECOVERY"
RECENTER = "RECENTER"
PROMOTE = "PROMOTE"
LOOP = "LOOP"

# minimum integration piece, shorter gaps between timestamps are skipped
_MIN_DT = 1e-12


@dataclass
class FilterConfig:
    n_clones: int = DEFAULT_N_CLONES
    keyframe_interval: float = DEFAULT_KEYFRAME_INTERVAL
    r_local: float = DEFAULT_R_LOCAL
    r_recenter: float = DEFAULT_R_LOCAL / 2.0
    keyframe_init_cov: bool = True
    loop_min_age: float = 10.0
    gate_quantile: float = DEFAULT_GATE_QUANTILE
    min_parallax_deg: float = DEFAULT_MIN_PARALLAX_DEG
    min_track_length: int = 3
    compress_measurements: bool = True
    pixel_sigma: float = 1.0
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def validate(self):
        if self.n_clones < 2:
            raise ConfigError(f"n_clones must be at least 2, got {self.n_clones}")
        if not 2 <= self.min_track_length <= self.n_clones:
            raise ConfigError(
                f"min_track_length must be in [2, n_clones], got {self.min_track_length}"
            )
        for name in ("keyframe_interval", "r_local", "r_recenter", "pixel_sigma"):
            if not getattr(self, name) > 0.0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.r_recenter > self.r_local:
            raise ConfigError(f"r_recenter {self.r_recenter} exceeds r_local {self.r_local}")
        if not 0.0 < self.gate_quantile < 1.0:
            raise ConfigError(f"gate_quantile must be in (0, 1), got {self.gate_quantile}")
        if self.loop_min_age < 0.0:
            raise ConfigError("loop_min_age must be non-negative")


@dataclass(frozen=True, eq=False)
class JournalEntry:
    """
    One operation applied to the filter unit, replayable by a dense twin
    """

    op: str
    args: tuple = ()


@dataclass
class StepResult:
    timestamp: float
    events: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    flops: float = 0.0
    tracks_processed: int = 0
    blocks_accepted: int = 0


class Estimator:
    """
    Base class for filter back-ends.

    Owns one filter unit (state, covariance, optional accumulator, feature
    tracks) and runs the per-frame front-end policy; back-ends override the
    update and recovery hooks.
    """

    name = None

    def __init__(self, config, camera, noise, imu, P_imu, timestamp=0.0, record=False):
        config.validate()
        self.lock = RLock()
        self.logger = logging.getLogger(__name__)
        self.config = config
        self.camera = camera
        self.noise = noise if noise is not None else ImuNoiseParams()
        self.state = initial_state(imu, timestamp, config.n_clones)
        self.cov = initial_covariance(P_imu)
        self.accumulator = None
        self.time = timestamp
        self.held_sample = None
        self.tracks = {}
        self.keyframe_observations = {}
        self.record = record
        self.journal = []

    def _log_op(self, op, *args):
        if self.record:
            self.journal.append(JournalEntry(op, args))

    def drain_journal(self):
        with self.lock:
            entries, self.journal = self.journal, []
            return entries

    def block_width(self):
        """
        Number of leading error-state columns every measurement block spans
        """
        return self.state.local_dim

    def requires_local_keyframes(self):
        """
        Whether keyframe constraints may only touch LOCAL keyframes
        """
        return False

    def apply_block(self, block):
        """
        Apply one linearized measurement block and return its UpdateReport
        """
        raise NotImplementedError

    def recover(self):
        """
        Bring the global partition up to date; returns the flop estimate
        """
        return 0.0

    def wants_recenter(self):
        """
        Whether the vehicle left the current local region
        """
        return False

    def recenter(self, center):
        """
        Recover, then re-split keyframes into LOCAL and GLOBAL around center
        """
        return 0.0

    def state_view(self):
        """
        State with every deferred correction applied, inputs untouched
        """
        return self.state

    def covariance_view(self):
        """
        Full covariance with every deferred correction applied
        """
        return self.cov.full()

    def pose_covariance(self):
        """
        6x6 covariance of the IMU pose error [dtheta, dp]
        """
        return self.cov.P_LL[np.ix_(IMU_POSE_INDEX, IMU_POSE_INDEX)].copy()

    def propagate(self, sample, dt):
        tb = compute_transition(self.state.imu, sample, dt, self.noise, self.config.gravity)
        imu = propagate_mean(self.state.imu, sample, dt, self.config.gravity)
        self.cov, self.accumulator = propagate_covariance(self.cov, tb, self.accumulator)
        self.state = _with_imu(self.state, imu)
        self._log_op("propagate", sample, dt, tb)

    def propagate_to(self, timestamp, samples):
        """
        Integrate up to timestamp, each sample held until the next one
        """
        with self.lock:
            for sample in samples:
                if self.held_sample is None:
                    self.held_sample = sample
                    continue
                if sample.timestamp - self.time > _MIN_DT:
                    self.propagate(self.held_sample, sample.timestamp - self.time)
                    self.time = sample.timestamp
                self.held_sample = sample
            if self.held_sample is not None and timestamp - self.time > _MIN_DT:
                self.propagate(self.held_sample, timestamp - self.time)
            self.time = max(self.time, timestamp)

    def add_clone(self, timestamp):
        self.state, self.cov = augment_clone(self.state, self.cov, timestamp, self.accumulator)
        self._log_op("clone", timestamp)

    def add_keyframe(self, timestamp):
        init_cov = self.config.keyframe_init_cov
        self.state, self.cov, kf_id = augment_keyframe(
            self.state,
            self.cov,
            timestamp,
            self.config.keyframe_interval,
            init_cov,
            self.accumulator,
        )
        self._log_op("keyframe", timestamp, init_cov)
        return kf_id

    def marginalize(self, ids):
        ids = sorted(ids)
        if not ids:
            return
        self.state, self.cov = marginalize_clones(self.state, self.cov, ids, self.accumulator)
        self._log_op("marginalize", tuple(ids))

    def keyframe_due(self, timestamp):
        last = self.state.last_keyframe_time
        return last is None or timestamp - last >= self.config.keyframe_interval - 1e-9

    def _bookkeep(self, clone_id, observations, keyframe_id):
        """
        Extend tracks with this frame's observations; return the tracks to
        process and drop them from the live set
        """
        if keyframe_id is not None:
            self.keyframe_observations[keyframe_id] = dict(observations)
        else:
            for fid, pixel in observations.items():
                track = self.tracks.get(fid)
                if track is None:
                    track = self.tracks[fid] = FeatureTrack(fid, pixel_sigma=self.config.pixel_sigma)
                track.add(clone_ref(clone_id), pixel)

        clones = self.state.clones
        oldest = clones[0].clone_id if len(clones) >= self.state.max_clones else None
        ready = []
        for fid, track in list(self.tracks.items()):
            lost = fid not in observations
            full = len(track) >= self.config.n_clones
            expiring = oldest is not None and any(ref.ident == oldest for ref in track.refs(CLONE))
            if lost or full or expiring:
                ready.append(track)
                del self.tracks[fid]
        return ready

    def _loop_candidates(self, track):
        """
        (keyframe id, pixel) of old keyframe observations of this feature
        """
        first = self.state.frame(track.observations[0][0]).timestamp
        candidates = []
        for kf_id in sorted(self.keyframe_observations):
            pixel = self.keyframe_observations[kf_id].get(track.feature_id)
            if pixel is None:
                continue
            kf = self.state.keyframe(kf_id)
            if first - kf.timestamp >= self.config.loop_min_age:
                candidates.append((kf_id, pixel))
        return candidates

    def _needs_promotion(self, kf_id):
        kf = self.state.keyframe(kf_id)
        if kf.partition is Partition.LOCAL:
            return False
        return np.linalg.norm(kf.pose.position - self.state.imu.position) <= self.config.r_local

    def _attach_keyframes(self, ready, result):
        """
        Add usable keyframe observations to the tracks, promoting GLOBAL
        keyframes near the vehicle first when only LOCAL ones may be used
        """
        candidates = {t.feature_id: self._loop_candidates(t) for t in ready}
        if self.requires_local_keyframes():
            promote = any(
                self._needs_promotion(kf_id) for cands in candidates.values() for kf_id, _ in cands
            )
            if promote:
                result.flops += self.recenter(self.state.imu.position)
                result.events.extend([RECOVERY, PROMOTE])

        attached = {}
        for track in ready:
            for kf_id, pixel in candidates[track.feature_id]:
                ref = keyframe_ref(kf_id)
                if self.requires_local_keyframes() and not self.state.is_local(ref):
                    continue
                track.add(ref, pixel)
                attached.setdefault(track.feature_id, []).append(kf_id)
        return attached

    def _linearize(self, ready):
        width = self.block_width()
        blocks = []
        for track in ready:
            if len(track) < self.config.min_track_length:
                continue
            try:
                if track.refs("keyframe"):
                    block = build_keyframe_constraint(
                        track,
                        self.state,
                        self.camera,
                        self.requires_local_keyframes(),
                        self.config.min_parallax_deg,
                    )
                    if block is None:
                        continue
                    block = block.padded(width) if block.width != width else block
                else:
                    block = build_feature_block(
                        track, self.state, self.camera, width, self.config.min_parallax_deg
                    )
            except (TriangulationError, RankDeficientFeature) as err:
                self.logger.debug(f"dropping feature {track.feature_id}: {err}")
                continue
            blocks.append(block)
        return blocks

    def _update(self, block, result):
        try:
            report = self.apply_block(block)
        except SingularInnovation as err:
            self.logger.warning(f"skipping update at t={result.timestamp:.3f}: {err}")
            return False
        self._log_op("update", block)
        result.reports.append(report)
        result.flops += report.local_cost_flops
        return True

    def _vision_update(self, ready, result):
        attached = self._attach_keyframes(ready, result)
        blocks = self._linearize(ready)
        P = self.cov.P_LL
        accepted = [b for b in blocks if chi2_gate(b, P, self.config.gate_quantile)]
        result.tracks_processed = len(ready)
        result.blocks_accepted = len(accepted)
        self.logger.debug(
            f"t={result.timestamp:.3f}: {len(ready)} tracks, {len(blocks)} blocks, "
            f"{len(accepted)} accepted"
        )
        if not accepted:
            return
        block = stack_blocks(accepted)
        if self.config.compress_measurements:
            block = compress_block(block)
        if not self._update(block, result):
            return
        for b in accepted:
            for fid in b.feature_ids:
                for kf_id in attached.get(fid, ()):
                    self.keyframe_observations[kf_id].pop(fid, None)
        if any(b.keyframe_ids for b in accepted):
            result.events.append(LOOP)

    def _marginalize_window(self):
        clones = self.state.clones
        if len(clones) < self.state.max_clones:
            return
        referenced = {
            ref.ident for track in self.tracks.values() for ref in track.refs(CLONE)
        }
        drop = {clones[0].clone_id}
        drop.update(c.clone_id for c in clones if c.clone_id not in referenced)
        self.marginalize(drop)

    def process_frame(self, timestamp, samples, observations, gps_fix=None):
        """
        Run one camera step: propagate, clone, keyframe, vision update, GPS
        update, recenter and marginalize
        """
        with self.lock:
            result = StepResult(timestamp)
            self.propagate_to(timestamp, samples)
            self.add_clone(timestamp)
            clone_id = self.state.clones[-1].clone_id

            keyframe_id = None
            if self.keyframe_due(timestamp):
                keyframe_id = self.add_keyframe(timestamp)
                result.events.append(KF_ADDED)
                self.logger.info(f"keyframe {keyframe_id} added at t={timestamp:.3f}")

            ready = self._bookkeep(clone_id, observations, keyframe_id)
            if ready:
                self._vision_update(ready, result)

            if gps_fix is not None:
                block = gps_update_block(gps_fix, self.state, self.block_width())
                if self._update(block, result):
                    result.events.append(GPS)

            if self.wants_recenter():
                result.flops += self.recenter(self.state.imu.position)
                result.events.extend([RECOVERY, RECENTER])

            self._marginalize_window()
            return result

    def finish(self):
        """
        End-of-run recovery; returns (events, flops)
        """
        with self.lock:
            if self.accumulator is None:
                return [], 0.0
            return [RECOVERY], self.recover()


def _with_imu(state, imu):
    return replace(state, imu=imu)


def resolve_backend(name):
    """
    Return the estimator class registered under name
    """
    if name not in pycmsckf.backends.BACKENDS:
        raise ConfigError(f"Unknown backend {name}")
    path = pycmsckf.backends.BACKENDS[name]
    target = __import__(".".join(path.split(".")[:-1]))
    for component in path.split(".")[1:]:
        target = getattr(target, component)
    return target
