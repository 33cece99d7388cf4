import numpy as np
import pytest

from conftest import make_state
from pycmsckf.errors import (
    BehindCamera,
    FilterError,
    GlobalKeyframeTouched,
    InvalidSpec,
    LowParallax,
    NonLocalBlock,
    RankDeficientFeature,
)
from pycmsckf.geom import Pose, UnitQuaternion
from pycmsckf.state import POSE_DIM, apply_correction, clone_ref, keyframe_ref
from pycmsckf.vision import (
    FeatureTrack,
    LinearizedBlock,
    PinholeCamera,
    build_feature_block,
    build_feature_jacobians,
    build_keyframe_constraint,
    chi2_gate,
    chi2_threshold,
    compress_block,
    innovation_chi2,
    nullspace_project,
    stack_blocks,
    triangulate,
)

LANDMARK = np.array([10.0, 0.5, 0.3])


def _lateral_poses(offsets):
    """
    Identity attitude (camera looking down global +x), spread along y
    """
    return [Pose(UnitQuaternion.identity(), [0.0, y, 0.0]) for y in offsets]


def _observe(camera, state, refs, point):
    track = FeatureTrack(0)
    for ref in refs:
        p_c = camera.to_camera(state.pose_of(ref), point)
        track.add(ref, camera.project(p_c)[0])
    return track


def _scene(camera, offsets=(-1.0, -0.5, 0.0, 0.5, 1.0), point=LANDMARK):
    state = make_state(_lateral_poses(offsets))
    refs = [clone_ref(c.clone_id) for c in state.clones]
    return state, _observe(camera, state, refs, point)


def test_forward_camera_looks_along_body_x(camera):
    pixel = camera.project(camera.to_camera(Pose.identity(), [10.0, 0.0, 0.0]))[0]
    np.testing.assert_allclose(pixel, camera.principal_point, atol=1e-12)
    # body +y (left) lands on the left half of the image
    pixel = camera.project(camera.to_camera(Pose.identity(), [10.0, 1.0, 0.0]))[0]
    assert pixel[0] < camera.principal_point[0]


def test_visibility(camera):
    points = np.array([[10.0, 0.0, 0.0], [-10.0, 0.0, 0.0], [50.0, 0.0, 0.0], [1.0, 5.0, 0.0]])
    p_c = camera.to_camera(Pose.identity(), points)
    assert camera.visible(p_c, camera.project(p_c)).tolist() == [True, False, False, False]


@pytest.mark.parametrize(
    "kwargs",
    [{"focal": (0.0, 320.0)}, {"principal_point": (700.0, 240.0)}, {"min_depth": 50.0}],
)
def test_camera_rejects_bad_intrinsics(kwargs):
    with pytest.raises(InvalidSpec):
        PinholeCamera(**kwargs)


def test_duplicate_observation_rejected():
    track = FeatureTrack(3)
    track.add(clone_ref(0), [1.0, 2.0])
    with pytest.raises(FilterError):
        track.add(clone_ref(0), [1.0, 2.0])
    assert len(track) == 1


def test_triangulation_recovers_landmark(camera):
    state, track = _scene(camera)
    np.testing.assert_allclose(triangulate(track, state, camera), LANDMARK, atol=1e-9)


def test_triangulation_with_noise_is_close(camera, rng):
    state, track = _scene(camera)
    for _, pixel in track.observations:
        pixel += rng.normal(0.0, 0.5, 2)
    assert np.linalg.norm(triangulate(track, state, camera) - LANDMARK) < 0.5


def test_triangulation_spread_matches_linearized_covariance(camera, rng):
    state, track = _scene(camera)
    _, H_f, _ = build_feature_jacobians(track, state, camera, LANDMARK)
    # inverse of the linearized covariance at 1 px noise
    info = H_f.T @ H_f
    errors = []
    for _ in range(500):
        state, track = _scene(camera)
        for _, pixel in track.observations:
            pixel += rng.normal(0.0, 1.0, 2)
        errors.append(triangulate(track, state, camera) - LANDMARK)
    errors = np.array(errors)
    mahalanobis = np.einsum("ni,ij,nj->n", errors, info, errors)
    assert 2.6 <= mahalanobis.mean() <= 3.4
    bias = errors.mean(axis=0)
    # chi2(3) 0.999 quantile
    assert len(errors) * bias @ info @ bias < 16.3


def test_low_parallax(camera):
    state, track = _scene(camera, offsets=(0.0, 0.01))
    with pytest.raises(LowParallax):
        triangulate(track, state, camera)
    state, track = _scene(camera, offsets=(0.0,))
    with pytest.raises(LowParallax):
        triangulate(track, state, camera)


def test_behind_camera(camera):
    state, track = _scene(camera, point=np.array([-10.0, 0.5, 0.3]))
    with pytest.raises(BehindCamera):
        triangulate(track, state, camera)


def test_residual_is_linear_in_error(camera, rng):
    state, track = _scene(camera)
    dx = np.zeros(state.error_dim)
    dx[15:] = rng.normal(0.0, 1e-6, state.error_dim - 15)
    estimate = apply_correction(state, -dx)
    H_x, H_f, residual = build_feature_jacobians(track, estimate, camera, LANDMARK)
    np.testing.assert_allclose(residual, H_x @ dx, atol=1e-9)


def test_feature_jacobian_matches_finite_differences(camera):
    state, track = _scene(camera)
    _, H_f, residual = build_feature_jacobians(track, state, camera, LANDMARK)
    eps = 1e-6
    for i in range(3):
        d = np.zeros(3)
        d[i] = eps
        _, _, plus = build_feature_jacobians(track, state, camera, LANDMARK + d)
        _, _, minus = build_feature_jacobians(track, state, camera, LANDMARK - d)
        np.testing.assert_allclose(-(plus - minus) / (2 * eps), H_f[:, i], atol=1e-5)


def test_nullspace_projection(camera, rng):
    state, track = _scene(camera, offsets=(-1.0, 1.0))
    H_x, H_f, residual = build_feature_jacobians(track, state, camera, LANDMARK + 0.1)
    block = nullspace_project(H_x, H_f, residual, 4.0 * np.eye(4))
    assert block.rows == 1
    assert block.width == state.error_dim
    np.testing.assert_allclose(block.noise_cov, 4.0 * np.eye(1), atol=1e-12)

    dp = rng.normal(size=3)
    shifted = nullspace_project(H_x, H_f, residual + H_f @ dp, 4.0 * np.eye(4))
    np.testing.assert_allclose(shifted.residual, block.residual, atol=1e-9)


def test_nullspace_rank_deficiency():
    with pytest.raises(RankDeficientFeature):
        nullspace_project(np.ones((2, 21)), np.ones((2, 3)), np.zeros(2), np.eye(2))
    H_f = np.zeros((6, 3))
    H_f[:, :2] = np.arange(12.0).reshape(6, 2)
    with pytest.raises(RankDeficientFeature):
        nullspace_project(np.ones((6, 21)), H_f, np.zeros(6), np.eye(6))


def test_feature_block_has_2m_minus_3_rows(camera):
    state, track = _scene(camera)
    block = build_feature_block(track, state, camera)
    assert block.rows == 2 * 5 - 3
    assert block.feature_ids == (0,)
    assert block.keyframe_ids == ()
    np.testing.assert_allclose(block.residual, 0.0, atol=1e-7)


def test_chi2_gate():
    H = np.eye(2)
    P = np.eye(2)
    quiet = LinearizedBlock(H, np.zeros(2), np.eye(2))
    loud = LinearizedBlock(H, np.array([10.0, 10.0]), np.eye(2))
    assert chi2_gate(quiet, P)
    assert not chi2_gate(loud, P)
    assert innovation_chi2(loud, P) == pytest.approx(100.0)
    assert chi2_threshold(2) == pytest.approx(5.991, abs=1e-3)


def test_chi2_gate_acceptance_rate(rng):
    H = rng.normal(size=(4, 6))
    P = 0.1 * np.eye(8)
    R = np.eye(4)
    S = H @ P[:6, :6] @ H.T + R
    L = np.linalg.cholesky(S)
    accepted = sum(
        chi2_gate(LinearizedBlock(H, L @ rng.standard_normal(4), R), P) for _ in range(4000)
    )
    assert accepted / 4000 == pytest.approx(0.95, abs=0.02)


def _keyframe_scene(camera, partition_global=False):
    poses = _lateral_poses((-1.0, -0.5, 0.0, 0.5))
    state = make_state(
        poses[2:], poses[:2], n_global=1 if partition_global else 0
    )
    refs = [keyframe_ref(0), keyframe_ref(1), clone_ref(0), clone_ref(1)]
    return state, _observe(camera, state, refs, LANDMARK)


def test_keyframe_constraint_needs_both_kinds(camera):
    state, track = _scene(camera)
    assert build_keyframe_constraint(track, state, camera) is None

    state, _ = _keyframe_scene(camera)
    track = _observe(camera, state, [keyframe_ref(0), keyframe_ref(1)], LANDMARK)
    assert build_keyframe_constraint(track, state, camera) is None


def test_keyframe_constraint_refuses_global_keyframes(camera):
    state, track = _keyframe_scene(camera, partition_global=True)
    with pytest.raises(GlobalKeyframeTouched) as err:
        build_keyframe_constraint(track, state, camera)
    assert err.value.keyframe_ids == [1]
    block = build_keyframe_constraint(track, state, camera, require_local=False)
    assert block.width == state.error_dim


def test_keyframe_constraint_ties_keyframes_to_clones(camera):
    state, track = _keyframe_scene(camera)
    block = build_keyframe_constraint(track, state, camera)
    assert block.width == state.local_dim
    assert block.keyframe_ids == (0, 1)
    for ref in (keyframe_ref(0), clone_ref(1)):
        col = state.column_of(ref)
        assert np.any(block.H[:, col : col + POSE_DIM])
    assert not np.any(block.H[:, :15])


def test_stack_and_pad(rng):
    a = LinearizedBlock(rng.normal(size=(2, 4)), np.ones(2), np.eye(2), (1,), (3,))
    b = LinearizedBlock(rng.normal(size=(3, 6)), np.ones(3), 2.0 * np.eye(3), (2,), (0, 3))
    stacked = stack_blocks([a, b])
    assert stacked.H.shape == (5, 6)
    assert not np.any(stacked.H[:2, 4:])
    assert stacked.noise_cov[4, 4] == 2.0 and stacked.noise_cov[0, 0] == 1.0
    assert stacked.feature_ids == (1, 2)
    assert stacked.keyframe_ids == (0, 3)
    assert stack_blocks([]) is None

    with pytest.raises(NonLocalBlock):
        b.local(4)
    assert a.local(4) is a


def test_compression_preserves_information(rng):
    H = rng.normal(size=(30, 8))
    r = rng.normal(size=30)
    block = LinearizedBlock(H, r, 2.0 * np.eye(30))
    small = compress_block(block)
    assert small.rows == 8
    np.testing.assert_allclose(small.H.T @ small.H, H.T @ H, atol=1e-10)
    np.testing.assert_allclose(small.H.T @ small.residual, H.T @ r, atol=1e-10)
    np.testing.assert_array_equal(small.noise_cov, 2.0 * np.eye(8))

    colored = LinearizedBlock(H, r, np.diag(np.linspace(1.0, 2.0, 30)))
    assert compress_block(colored) is colored


@pytest.mark.parametrize("seed", range(20))
def test_projected_blocks_ignore_the_feature(camera, seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 8))
    offsets = np.linspace(-1.5, 1.5, m) + rng.uniform(-0.1, 0.1, m)
    point = np.array([rng.uniform(5.0, 30.0), rng.uniform(-3.0, 3.0), rng.uniform(-2.0, 2.0)])
    state, track = _scene(camera, offsets=tuple(offsets), point=point)
    H_x, H_f, residual = build_feature_jacobians(track, state, camera, point)
    block = nullspace_project(H_x, H_f, residual, track.noise_cov)
    assert block.rows == 2 * m - 3
    shifted = nullspace_project(H_x, H_f, residual + H_f @ rng.normal(size=3), track.noise_cov)
    np.testing.assert_allclose(shifted.residual, block.residual, atol=1e-10)
