"""
Vision measurement pipeline: pinhole projection, multi-view triangulation,
stacked feature Jacobians, left-nullspace projection, chi-square gating and
keyframe (loop-closure) constraints.

A camera is attached to the IMU by its extrinsics pose: the orientation maps
IMU-frame vectors into the camera frame, the position is the camera origin
in the IMU frame. Camera axes are x right, y down, z along the optical axis.
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg
from scipy.stats import chi2

from pycmsckf.errors import (
    BehindCamera,
    DimensionMismatch,
    Diverged,
    FilterError,
    GlobalKeyframeTouched,
    InvalidSpec,
    LowParallax,
    NonLocalBlock,
    RankDeficientFeature,
)
from pycmsckf.geom import Pose, UnitQuaternion, skew
from pycmsckf.state import CLONE, KEYFRAME, POSE_DIM

_LOGGER = logging.getLogger(__name__)

MAX_GN_ITERATIONS = 10
GN_STEP_TOL = 1e-6
MAX_GROWING_ITERATIONS = 3
DEFAULT_MIN_PARALLAX_DEG = 1.0
DEFAULT_GATE_QUANTILE = 0.95

# body x forward, y left, z up  ->  camera x right, y down, z forward
FORWARD_CAMERA = UnitQuaternion.from_matrix(
    np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
)


@dataclass(frozen=True, eq=False)
class PinholeCamera:
    focal: tuple = (320.0, 320.0)
    principal_point: tuple = (320.0, 240.0)
    image_size: tuple = (640, 480)
    extrinsics: Pose = field(default_factory=lambda: Pose(FORWARD_CAMERA, np.zeros(3)))
    min_depth: float = 0.5
    max_depth: float = 40.0

    def __post_init__(self):
        fx, fy = self.focal
        cx, cy = self.principal_point
        w, h = self.image_size
        if fx <= 0.0 or fy <= 0.0:
            raise InvalidSpec(f"focal lengths must be positive, got {self.focal}")
        if not (0.0 <= cx < w and 0.0 <= cy < h):
            raise InvalidSpec(
                f"principal point {self.principal_point} outside image {self.image_size}"
            )
        if not 0.0 < self.min_depth < self.max_depth:
            raise InvalidSpec(f"bad depth range [{self.min_depth}, {self.max_depth}]")

    @property
    def C_CI(self):
        return self.extrinsics.matrix

    def camera_frame(self, pose):
        """
        (C_CG, camera centre in {G}) for an IMU pose
        """
        C_IG = pose.matrix
        return self.C_CI @ C_IG, pose.position + C_IG.T @ self.extrinsics.position

    def to_camera(self, pose, points):
        C_CG, center = self.camera_frame(pose)
        return (np.atleast_2d(points) - center) @ C_CG.T

    def project(self, p_c):
        p_c = np.atleast_2d(p_c)
        fx, fy = self.focal
        cx, cy = self.principal_point
        return np.column_stack(
            [fx * p_c[:, 0] / p_c[:, 2] + cx, fy * p_c[:, 1] / p_c[:, 2] + cy]
        )

    def projection_jacobian(self, p_c):
        fx, fy = self.focal
        x, y, z = p_c
        return np.array(
            [
                [fx / z, 0.0, -fx * x / (z * z)],
                [0.0, fy / z, -fy * y / (z * z)],
            ]
        )

    def normalized(self, pixel):
        fx, fy = self.focal
        cx, cy = self.principal_point
        return np.array([(pixel[0] - cx) / fx, (pixel[1] - cy) / fy])

    def visible(self, p_c, pixels):
        w, h = self.image_size
        depth = p_c[:, 2]
        return (
            (depth >= self.min_depth)
            & (depth <= self.max_depth)
            & (pixels[:, 0] >= 0.0)
            & (pixels[:, 0] < w)
            & (pixels[:, 1] >= 0.0)
            & (pixels[:, 1] < h)
        )


@dataclass(eq=False)
class FeatureTrack:
    feature_id: int
    observations: list = field(default_factory=list)
    pixel_sigma: float = 1.0

    def add(self, ref, pixel):
        if any(r == ref for r, _ in self.observations):
            raise FilterError(f"feature {self.feature_id} already observed in {ref}")
        self.observations.append((ref, np.asarray(pixel, dtype=float)))

    def refs(self, kind=None):
        return [ref for ref, _ in self.observations if kind is None or ref.kind == kind]

    def __len__(self):
        return len(self.observations)

    @property
    def noise_cov(self):
        return self.pixel_sigma**2 * np.eye(2 * len(self.observations))


@dataclass(eq=False)
class LinearizedBlock:
    """
    r = H dx + n, n ~ N(0, noise_cov); H spans the first `width` error-state
    columns (a local block when width <= local_dim)
    """

    H: np.ndarray
    residual: np.ndarray
    noise_cov: np.ndarray
    feature_ids: tuple = ()
    keyframe_ids: tuple = ()

    @property
    def rows(self):
        return self.H.shape[0]

    @property
    def width(self):
        return self.H.shape[1]

    def padded(self, width):
        if width < self.width:
            if np.any(self.H[:, width:]):
                raise NonLocalBlock(f"block has non-zero columns beyond {width}")
            H = self.H[:, :width]
        else:
            H = np.zeros((self.rows, width))
            H[:, : self.width] = self.H
        return LinearizedBlock(H, self.residual, self.noise_cov, self.feature_ids, self.keyframe_ids)

    def local(self, local_dim):
        """
        Block restricted to the local columns; raises NonLocalBlock otherwise
        """
        if self.width == local_dim:
            return self
        return self.padded(local_dim)


def _view_geometry(track, state, camera):
    rotations = []
    centers = []
    pixels = []
    for ref, pixel in track.observations:
        C_CG, center = camera.camera_frame(state.pose_of(ref))
        rotations.append(C_CG)
        centers.append(center)
        pixels.append(pixel)
    return np.array(rotations), np.array(centers), np.array(pixels)


def _reprojection(camera, rotations, centers, pixels, p_f):
    p_c = np.einsum("nij,nj->ni", rotations, p_f - centers)
    if np.any(p_c[:, 2] <= 0.0):
        raise BehindCamera("feature behind at least one camera")
    residual = (pixels - camera.project(p_c)).reshape(-1)
    jac = np.array([camera.projection_jacobian(pc) for pc in p_c])
    H_f = np.einsum("nij,njk->nik", jac, rotations).reshape(-1, 3)
    return residual, H_f


def triangulate(track, state, camera, min_parallax_deg=DEFAULT_MIN_PARALLAX_DEG):
    """
    Linear (DLT) initialization refined by Gauss-Newton on reprojection error
    """
    if len(track) < 2:
        raise LowParallax(f"feature {track.feature_id} has {len(track)} observation(s)")
    rotations, centers, pixels = _view_geometry(track, state, camera)
    normalized = np.array([camera.normalized(z) for z in pixels])

    rays = np.column_stack([normalized, np.ones(len(normalized))])
    bearings = np.einsum("nji,nj->ni", rotations, rays)
    bearings /= np.linalg.norm(bearings, axis=1, keepdims=True)
    min_cos = np.clip(np.min(bearings @ bearings.T), -1.0, 1.0)
    parallax = np.degrees(np.arccos(min_cos))
    if parallax < min_parallax_deg:
        raise LowParallax(f"feature {track.feature_id} parallax {parallax:.3f} deg")

    r1, r2, r3 = rotations[:, 0, :], rotations[:, 1, :], rotations[:, 2, :]
    A = np.concatenate(
        [normalized[:, [0]] * r3 - r1, normalized[:, [1]] * r3 - r2], axis=0
    )
    b = np.einsum("ni,ni->n", A, np.concatenate([centers, centers], axis=0))
    p_f = np.linalg.lstsq(A, b, rcond=None)[0]

    residual, H_f = _reprojection(camera, rotations, centers, pixels, p_f)
    cost = residual @ residual
    growing = 0
    for _ in range(MAX_GN_ITERATIONS):
        step = np.linalg.lstsq(H_f, residual, rcond=None)[0]
        p_f = p_f + step
        residual, H_f = _reprojection(camera, rotations, centers, pixels, p_f)
        new_cost = residual @ residual
        if new_cost > cost:
            growing += 1
            if growing >= MAX_GROWING_ITERATIONS:
                raise Diverged(f"feature {track.feature_id} reprojection error keeps growing")
        else:
            growing = 0
        cost = new_cost
        if np.linalg.norm(step) < GN_STEP_TOL:
            break
    return p_f


def build_feature_jacobians(track, state, camera, p_f, width=None):
    """
    Stacked residual z - h(x, p_f) with its Jacobians H_x (m x width) and H_f
    """
    if width is None:
        width = state.error_dim
    p_f = np.asarray(p_f, dtype=float)
    if not np.all(np.isfinite(p_f)):
        raise FilterError("feature position must be finite")

    m = 2 * len(track)
    H_x = np.zeros((m, width))
    H_f = np.zeros((m, 3))
    residual = np.zeros(m)
    C_CI = camera.C_CI
    p_CI = camera.extrinsics.position

    for i, (ref, z) in enumerate(track.observations):
        pose = state.pose_of(ref)
        col = state.column_of(ref)
        if col + POSE_DIM > width:
            raise DimensionMismatch(f"{ref} lies outside the first {width} columns")
        C = pose.matrix
        q = C @ (p_f - pose.position)
        p_c = C_CI @ (q - p_CI)
        jac = camera.projection_jacobian(p_c) @ C_CI
        rows = slice(2 * i, 2 * i + 2)
        H_x[rows, col : col + 3] = -jac @ skew(q)
        H_x[rows, col + 3 : col + 6] = -jac @ C
        H_f[rows] = jac @ C
        residual[rows] = z - camera.project(p_c)[0]
    return H_x, H_f, residual


def nullspace_project(H_x, H_f, residual, R_f):
    m = H_f.shape[0]
    if m <= 3 or np.linalg.matrix_rank(H_f) < 3:
        raise RankDeficientFeature(f"feature Jacobian of shape {H_f.shape} is rank deficient")
    Q, _ = scipy.linalg.qr(H_f, mode="full")
    N = Q[:, 3:]
    R = N.T @ R_f @ N
    return LinearizedBlock(N.T @ H_x, N.T @ residual, 0.5 * (R + R.T))


@lru_cache(maxsize=None)
def chi2_threshold(dof, quantile=DEFAULT_GATE_QUANTILE):
    return chi2.ppf(quantile, dof)


def innovation_chi2(block, P):
    w = block.width
    S = block.H @ P[:w, :w] @ block.H.T + block.noise_cov
    return float(block.residual @ np.linalg.solve(S, block.residual))


def chi2_gate(block, P, quantile=DEFAULT_GATE_QUANTILE):
    """
    Accept iff r' S^-1 r <= chi2 quantile with `rows` degrees of freedom.

    P is the local covariance P_LL or any covariance whose leading block
    covers the block's columns.
    """
    if P.shape[0] < block.width:
        raise DimensionMismatch(f"covariance {P.shape} narrower than block width {block.width}")
    return innovation_chi2(block, P) <= chi2_threshold(block.rows, quantile)


def build_feature_block(track, state, camera, width=None, min_parallax_deg=DEFAULT_MIN_PARALLAX_DEG):
    p_f = triangulate(track, state, camera, min_parallax_deg)
    H_x, H_f, residual = build_feature_jacobians(track, state, camera, p_f, width)
    block = nullspace_project(H_x, H_f, residual, track.noise_cov)
    block.feature_ids = (track.feature_id,)
    block.keyframe_ids = tuple(ref.ident for ref in track.refs(KEYFRAME))
    return block


def build_keyframe_constraint(
    track, state, camera, require_local=True, min_parallax_deg=DEFAULT_MIN_PARALLAX_DEG
):
    """
    Feature block tying current clones to keyframes that saw the same landmark.

    Returns None when the track lacks a keyframe or a clone observation.
    With require_local, raises GlobalKeyframeTouched if any keyframe is GLOBAL.
    """
    keyframes = track.refs(KEYFRAME)
    if not keyframes or not track.refs(CLONE):
        return None
    if require_local:
        touched = [ref.ident for ref in keyframes if not state.is_local(ref)]
        if touched:
            raise GlobalKeyframeTouched(touched)
    width = state.local_dim if require_local else state.error_dim
    return build_feature_block(track, state, camera, width, min_parallax_deg)


def stack_blocks(blocks):
    if not blocks:
        return None
    width = max(b.width for b in blocks)
    blocks = [b.padded(width) for b in blocks]
    return LinearizedBlock(
        np.vstack([b.H for b in blocks]),
        np.concatenate([b.residual for b in blocks]),
        scipy.linalg.block_diag(*[b.noise_cov for b in blocks]),
        tuple(f for b in blocks for f in b.feature_ids),
        tuple(sorted({k for b in blocks for k in b.keyframe_ids})),
    )


def compress_block(block):
    """
    QR measurement compression when rows exceed width and noise is isotropic
    """
    if block.rows <= block.width:
        return block
    sigma2 = block.noise_cov[0, 0]
    if not np.allclose(block.noise_cov, sigma2 * np.eye(block.rows), rtol=0.0, atol=1e-12 * sigma2):
        return block
    Q, R = scipy.linalg.qr(block.H, mode="economic")
    return LinearizedBlock(
        R,
        Q.T @ block.residual,
        sigma2 * np.eye(R.shape[0]),
        block.feature_ids,
        block.keyframe_ids,
    )
