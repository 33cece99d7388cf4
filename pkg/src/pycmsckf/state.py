"""
Filter state: IMU state, sliding window of clones, keyframes split into a
local and a global partition, and the partitioned covariance.

Error-state layout (columns of every covariance and Jacobian):

    [ IMU (15) | clones (6 each, window order) | LOCAL keyframes | GLOBAL keyframes ]

with the IMU block ordered [dtheta, db_g, dv, db_a, dp] and each pose block
[dtheta, dp]. The local columns are always a prefix of the full layout.

All operations here return new StateVector / PartitionedCovariance objects
and never modify their inputs. A CompressedAccumulator passed in is the one
mutable exception: it absorbs the local row maps in place of P_LG.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property

import numpy as np

from pycmsckf.accumulator import CompressedAccumulator
from pycmsckf.errors import (
    DimensionMismatch,
    FilterError,
    StaleAccumulator,
    TooSoon,
    UnknownClone,
    UnknownFrameRef,
    WindowFull,
)
from pycmsckf.geom import Pose, UnitQuaternion, attitude_boxminus, attitude_boxplus, boxminus, boxplus

_LOGGER = logging.getLogger(__name__)

IMU_DIM = 15
POSE_DIM = 6

ATT = slice(0, 3)
BG = slice(3, 6)
VEL = slice(6, 9)
BA = slice(9, 12)
POS = slice(12, 15)

# IMU pose columns, in pose-block order [dtheta, dp]
IMU_POSE_INDEX = np.array([0, 1, 2, 12, 13, 14])

DEFAULT_N_CLONES = 10
DEFAULT_KEYFRAME_INTERVAL = 5.0
DEFAULT_R_LOCAL = 35.0

# slack on cadence checks for timestamps built from frame counters
_TIME_EPS = 1e-9


class Partition(Enum):
    LOCAL = "LOCAL"
    GLOBAL = "GLOBAL"


CLONE = "clone"
KEYFRAME = "keyframe"


@dataclass(frozen=True)
class FrameRef:
    kind: str
    ident: int

    def __str__(self):
        return f"{self.kind}:{self.ident}"


def clone_ref(clone_id):
    return FrameRef(CLONE, clone_id)


def keyframe_ref(keyframe_id):
    return FrameRef(KEYFRAME, keyframe_id)


def _vec3(v):
    a = np.array(v, dtype=float).reshape(3)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ImuState:
    attitude: UnitQuaternion
    gyro_bias: np.ndarray
    velocity: np.ndarray
    accel_bias: np.ndarray
    position: np.ndarray

    def __post_init__(self):
        for name in ("gyro_bias", "velocity", "accel_bias", "position"):
            object.__setattr__(self, name, _vec3(getattr(self, name)))
        if not (np.all(np.isfinite(self.gyro_bias)) and np.all(np.isfinite(self.accel_bias))):
            raise FilterError("IMU biases must be finite")

    @classmethod
    def at_rest(cls, attitude=None, position=(0.0, 0.0, 0.0)):
        return cls(
            attitude if attitude is not None else UnitQuaternion.identity(),
            np.zeros(3),
            np.zeros(3),
            np.zeros(3),
            position,
        )

    @property
    def pose(self):
        return Pose(self.attitude, self.position)

    def to_vector(self):
        """
        The 16 IMU scalars: q (wxyz), b_g, v, b_a, p
        """
        return np.concatenate(
            [self.attitude.wxyz, self.gyro_bias, self.velocity, self.accel_bias, self.position]
        )


@dataclass(frozen=True, eq=False)
class Clone:
    clone_id: int
    pose: Pose
    timestamp: float


@dataclass(frozen=True, eq=False)
class Keyframe:
    keyframe_id: int
    pose: Pose
    timestamp: float
    partition: Partition = Partition.LOCAL


@dataclass(frozen=True, eq=False)
class StateVector:
    imu: ImuState
    clones: tuple = ()
    keyframes: tuple = ()
    local_center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    max_clones: int = DEFAULT_N_CLONES
    next_clone_id: int = 0
    next_keyframe_id: int = 0
    last_keyframe_time: float = None

    def __post_init__(self):
        object.__setattr__(self, "local_center", _vec3(self.local_center))

    @cached_property
    def n_local_keyframes(self):
        n = 0
        for kf in self.keyframes:
            if kf.partition is Partition.GLOBAL:
                break
            n += 1
        return n

    @property
    def active_dim(self):
        return IMU_DIM + POSE_DIM * len(self.clones)

    @property
    def local_dim(self):
        return self.active_dim + POSE_DIM * self.n_local_keyframes

    @property
    def global_dim(self):
        return POSE_DIM * (len(self.keyframes) - self.n_local_keyframes)

    @property
    def error_dim(self):
        return IMU_DIM + POSE_DIM * (len(self.clones) + len(self.keyframes))

    @property
    def local_keyframes(self):
        return self.keyframes[: self.n_local_keyframes]

    @property
    def global_keyframes(self):
        return self.keyframes[self.n_local_keyframes :]

    @cached_property
    def _columns(self):
        cols = {}
        start = IMU_DIM
        for clone in self.clones:
            cols[clone_ref(clone.clone_id)] = start
            start += POSE_DIM
        for kf in self.keyframes:
            cols[keyframe_ref(kf.keyframe_id)] = start
            start += POSE_DIM
        return cols

    @cached_property
    def _frames(self):
        frames = {clone_ref(c.clone_id): c for c in self.clones}
        frames.update({keyframe_ref(k.keyframe_id): k for k in self.keyframes})
        return frames

    def column_of(self, ref):
        """
        First error-state column of the pose block referenced by `ref`
        """
        try:
            return self._columns[ref]
        except KeyError:
            raise UnknownFrameRef(f"unknown frame {ref}") from None

    def frame(self, ref):
        try:
            return self._frames[ref]
        except KeyError:
            raise UnknownFrameRef(f"unknown frame {ref}") from None

    def pose_of(self, ref):
        return self.frame(ref).pose

    def has_frame(self, ref):
        return ref in self._frames

    def keyframe(self, keyframe_id):
        return self.frame(keyframe_ref(keyframe_id))

    def is_local(self, ref):
        return self.column_of(ref) < self.local_dim

    def pose_blocks(self):
        """
        (ref, pose, first column) for every clone and keyframe, in layout order
        """
        for ref, start in self._columns.items():
            yield ref, self._frames[ref].pose, start


@dataclass(eq=False)
class PartitionedCovariance:
    """
    Covariance kept as the blocks P_LL, P_LG, P_GG.

    While a compressed filter accumulates, P_LG holds the epoch-start value
    and has `accumulator.epoch_dim` rows instead of `local_dim`.
    """

    P_LL: np.ndarray
    P_LG: np.ndarray
    P_GG: np.ndarray

    @classmethod
    def from_full(cls, P, local_dim):
        P = np.asarray(P, dtype=float)
        return cls(
            P[:local_dim, :local_dim].copy(),
            P[:local_dim, local_dim:].copy(),
            P[local_dim:, local_dim:].copy(),
        )

    @property
    def local_dim(self):
        return self.P_LL.shape[0]

    @property
    def global_dim(self):
        return self.P_GG.shape[0]

    @property
    def dim(self):
        return self.local_dim + self.global_dim

    def full(self):
        if self.P_LG.shape != (self.local_dim, self.global_dim):
            raise DimensionMismatch(
                f"P_LG is {self.P_LG.shape}, expected {(self.local_dim, self.global_dim)}; "
                "recover the global partition first"
            )
        return np.block([[self.P_LL, self.P_LG], [self.P_LG.T, self.P_GG]])

    def variances(self, start, stop):
        """
        Diagonal entries for columns [start, stop) of the full layout
        """
        dL = self.local_dim
        if stop <= dL:
            return np.diag(self.P_LL)[start:stop].copy()
        return np.diag(self.P_GG)[start - dL : stop - dL].copy()

    def copy(self):
        return PartitionedCovariance(self.P_LL.copy(), self.P_LG.copy(), self.P_GG.copy())


def symmetrize(P):
    return 0.5 * (P + P.T)


def covariance_health(P):
    """
    Return (relative asymmetry, min eigenvalue / trace) of a covariance
    """
    P = np.asarray(P)
    if P.size == 0:
        return 0.0, 0.0
    tr = max(np.trace(P), np.finfo(float).tiny)
    asym = np.max(np.abs(P - P.T)) / tr
    min_eig = np.linalg.eigvalsh(symmetrize(P)).min() / tr
    return asym, min_eig


def initial_state(imu, timestamp=0.0, max_clones=DEFAULT_N_CLONES):
    return StateVector(
        imu=imu,
        local_center=imu.position,
        max_clones=max_clones,
        last_keyframe_time=timestamp,
    )


def initial_covariance(P_imu):
    P_imu = np.asarray(P_imu, dtype=float)
    if P_imu.shape != (IMU_DIM, IMU_DIM):
        raise DimensionMismatch(f"IMU covariance must be {IMU_DIM}x{IMU_DIM}")
    return PartitionedCovariance(P_imu.copy(), np.zeros((IMU_DIM, 0)), np.zeros((0, 0)))


def _insert_pose_copy(cov, at, init_cov, accumulator):
    dL = cov.local_dim
    index = np.concatenate([np.arange(at), IMU_POSE_INDEX, np.arange(at, dL)])
    new = np.arange(at, at + POSE_DIM)

    P_LL = cov.P_LL[np.ix_(index, index)]
    if not init_cov:
        block = cov.P_LL[np.ix_(IMU_POSE_INDEX, IMU_POSE_INDEX)]
        P_LL[new, :] = 0.0
        P_LL[:, new] = 0.0
        P_LL[np.ix_(new, new)] = block

    if accumulator is None:
        P_LG = cov.P_LG[index, :]
        if not init_cov:
            P_LG[new, :] = 0.0
    else:
        P_LG = cov.P_LG
        accumulator.remap_rows(index, zero_rows=() if init_cov else new)
    return PartitionedCovariance(P_LL, P_LG, cov.P_GG)


def augment_clone(state, cov, timestamp, accumulator=None):
    """
    Clone the current IMU pose into the window with exact covariance copy
    """
    if len(state.clones) >= state.max_clones:
        raise WindowFull(f"window holds {len(state.clones)} clones")
    if state.clones and timestamp <= state.clones[-1].timestamp:
        raise FilterError(
            f"clone timestamp {timestamp} not after {state.clones[-1].timestamp}"
        )

    cov = _insert_pose_copy(cov, state.active_dim, True, accumulator)
    clone = Clone(state.next_clone_id, state.imu.pose, timestamp)
    state = replace(
        state,
        clones=state.clones + (clone,),
        next_clone_id=state.next_clone_id + 1,
    )
    return state, cov


def marginalize_clones(state, cov, ids, accumulator=None):
    ids = set(ids)
    if not ids:
        return state, cov

    known = {c.clone_id for c in state.clones}
    unknown = ids - known
    if unknown:
        raise UnknownClone(f"unknown clones {sorted(unknown)}")

    drop = []
    for clone in state.clones:
        if clone.clone_id in ids:
            start = state.column_of(clone_ref(clone.clone_id))
            drop.extend(range(start, start + POSE_DIM))
    keep = np.setdiff1d(np.arange(cov.local_dim), drop)

    P_LL = cov.P_LL[np.ix_(keep, keep)]
    if accumulator is None:
        P_LG = cov.P_LG[keep, :]
    else:
        P_LG = cov.P_LG
        accumulator.remap_rows(keep)

    state = replace(
        state, clones=tuple(c for c in state.clones if c.clone_id not in ids)
    )
    return state, PartitionedCovariance(P_LL, P_LG, cov.P_GG)


def augment_keyframe(
    state,
    cov,
    timestamp,
    keyframe_interval=DEFAULT_KEYFRAME_INTERVAL,
    init_cov=True,
    accumulator=None,
):
    """
    Add the current IMU pose as a LOCAL keyframe.

    With init_cov the keyframe rows/columns copy the IMU pose rows/columns;
    without it the keyframe only gets the IMU pose marginal.
    """
    last = state.last_keyframe_time
    if last is not None and timestamp - last < keyframe_interval - _TIME_EPS:
        raise TooSoon(
            f"keyframe at {timestamp:.3f}s, last at {last:.3f}s, interval {keyframe_interval}s"
        )

    cov = _insert_pose_copy(cov, state.local_dim, init_cov, accumulator)
    keyframe = Keyframe(state.next_keyframe_id, state.imu.pose, timestamp, Partition.LOCAL)
    keyframes = state.local_keyframes + (keyframe,) + state.global_keyframes
    state = replace(
        state,
        keyframes=keyframes,
        next_keyframe_id=state.next_keyframe_id + 1,
        last_keyframe_time=timestamp,
    )
    return state, cov, keyframe.keyframe_id


def partition_tags(state, center, r_local):
    center = np.asarray(center, dtype=float)
    return {
        kf.keyframe_id: (
            Partition.LOCAL
            if np.linalg.norm(kf.pose.position - center) <= r_local
            else Partition.GLOBAL
        )
        for kf in state.keyframes
    }


def repartition(state, cov, accumulator, new_center, r_local=DEFAULT_R_LOCAL, tags=None):
    """
    Re-tag keyframes around new_center and permute the covariance to match.

    `tags` (keyframe id -> Partition) overrides the radius rule; it is used to
    replay a partition decided elsewhere. Returns (state, cov, accumulator),
    the accumulator being a fresh one sized to the new local partition.
    """
    if accumulator is not None and not accumulator.is_reset():
        raise StaleAccumulator("recover the global partition before repartitioning")

    if tags is None:
        tags = partition_tags(state, new_center, r_local)

    local = sorted(
        (kf for kf in state.keyframes if tags[kf.keyframe_id] is Partition.LOCAL),
        key=lambda kf: kf.keyframe_id,
    )
    glob = sorted(
        (kf for kf in state.keyframes if tags[kf.keyframe_id] is Partition.GLOBAL),
        key=lambda kf: kf.keyframe_id,
    )

    perm = [np.arange(state.active_dim)]
    for kf in local + glob:
        start = state.column_of(keyframe_ref(kf.keyframe_id))
        perm.append(np.arange(start, start + POSE_DIM))
    perm = np.concatenate(perm)

    P = cov.full()[np.ix_(perm, perm)]
    keyframes = tuple(replace(kf, partition=Partition.LOCAL) for kf in local) + tuple(
        replace(kf, partition=Partition.GLOBAL) for kf in glob
    )
    state = replace(state, keyframes=keyframes, local_center=new_center)
    cov = PartitionedCovariance.from_full(P, state.local_dim)

    new_acc = None
    if accumulator is not None:
        new_acc = CompressedAccumulator.reset(state.local_dim)
    _LOGGER.debug(
        f"repartition around {np.round(new_center, 2).tolist()}: "
        f"{len(local)} local, {len(glob)} global keyframes"
    )
    return state, cov, new_acc


def apply_correction(state, dx):
    """
    Boxplus an error-state correction onto the state.

    dx may cover the full layout or only its local prefix; global keyframes
    are left alone in the latter case.
    """
    dx = np.asarray(dx, dtype=float)
    if dx.shape[0] not in (state.local_dim, state.error_dim):
        raise DimensionMismatch(
            f"correction of length {dx.shape[0]}, state has "
            f"{state.local_dim} local / {state.error_dim} total"
        )
    local_only = dx.shape[0] < state.error_dim

    imu = state.imu
    imu = ImuState(
        attitude_boxplus(imu.attitude, dx[ATT]),
        imu.gyro_bias + dx[BG],
        imu.velocity + dx[VEL],
        imu.accel_bias + dx[BA],
        imu.position + dx[POS],
    )
    # a local-prefix correction passes global keyframes through as they are
    frames = state.clones + (state.local_keyframes if local_only else state.keyframes)
    corrected = []
    start = IMU_DIM
    for frame in frames:
        corrected.append(replace(frame, pose=boxplus(frame.pose, dx[start : start + POSE_DIM])))
        start += POSE_DIM
    n_clones = len(state.clones)
    keyframes = tuple(corrected[n_clones:])
    if local_only:
        keyframes += state.global_keyframes
    return replace(state, imu=imu, clones=tuple(corrected[:n_clones]), keyframes=keyframes)


def apply_global_correction(state, dx_global):
    dx_global = np.asarray(dx_global, dtype=float)
    if dx_global.shape[0] != state.global_dim:
        raise DimensionMismatch(
            f"global correction of length {dx_global.shape[0]}, expected {state.global_dim}"
        )
    dx = np.concatenate([np.zeros(state.local_dim), dx_global])
    return apply_correction(state, dx)


def state_difference(a, b):
    """
    Manifold difference a [-] b over the full error-state layout
    """
    refs_a = [ref for ref, _, _ in a.pose_blocks()]
    refs_b = [ref for ref, _, _ in b.pose_blocks()]
    if refs_a != refs_b:
        raise DimensionMismatch("states hold different clones or keyframes")

    parts = [
        attitude_boxminus(a.imu.attitude, b.imu.attitude),
        a.imu.gyro_bias - b.imu.gyro_bias,
        a.imu.velocity - b.imu.velocity,
        a.imu.accel_bias - b.imu.accel_bias,
        a.imu.position - b.imu.position,
    ]
    for ref in refs_a:
        parts.append(boxminus(a.pose_of(ref), b.pose_of(ref)))
    return np.concatenate(parts)


def snapshot_rows(state, cov, timestamp):
    """
    One row per keyframe: pose, 3-sigma position/attitude bounds, partition
    """
    rows = []
    for kf in state.keyframes:
        start = state.column_of(keyframe_ref(kf.keyframe_id))
        var = cov.variances(start, start + POSE_DIM)
        sigma3 = 3.0 * np.sqrt(np.maximum(var, 0.0))
        x, y, z = kf.pose.position
        rows.append(
            {
                "timestamp": timestamp,
                "keyframe_id": kf.keyframe_id,
                "partition": kf.partition.value,
                "x": x,
                "y": y,
                "z": z,
                "sigma3_roll": sigma3[0],
                "sigma3_pitch": sigma3[1],
                "sigma3_yaw": sigma3[2],
                "sigma3_x": sigma3[3],
                "sigma3_y": sigma3[4],
                "sigma3_z": sigma3[5],
            }
        )
    return rows
