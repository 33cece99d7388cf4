"""
Measurement-update engines over LinearizedBlocks: the dense EKF (Joseph
form), the Schmidt consider update and the compressed local update, plus
recovery of the global partition from a CompressedAccumulator and analytic
flop estimates of each.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from pycmsckf.accumulator import CompressedAccumulator
from pycmsckf.errors import DimensionMismatch, SingularInnovation
from pycmsckf.state import PartitionedCovariance, apply_correction, apply_global_correction, symmetrize

_LOGGER = logging.getLogger(__name__)

MAX_INNOVATION_CONDITION = 1e12


@dataclass
class UpdateReport:
    residual_dim: int
    chi2: float
    local_cost_flops: float
    accepted: bool = True


def _innovation(H, P, R):
    S = symmetrize(H @ P @ H.T + R)
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > MAX_INNOVATION_CONDITION:
        raise SingularInnovation(f"innovation covariance condition number {cond:.3e}")
    return S, scipy.linalg.cho_factor(S)


def ekf_correction(P, H, r, R):
    """
    One EKF step on a plain covariance matrix.

    Returns (dx, P_post, chi2) with P_post in Joseph form.
    """
    S, cho = _innovation(H, P, R)
    PHt = P @ H.T
    K = scipy.linalg.cho_solve(cho, PHt.T).T
    I_KH = np.eye(P.shape[0]) - K @ H
    P_post = I_KH @ P @ I_KH.T + K @ R @ K.T
    chi2 = float(r @ scipy.linalg.cho_solve(cho, r))
    return K @ r, symmetrize(P_post), chi2


def dense_update_flops(dim, rows):
    return 4.0 * dim**3 + 4.0 * dim**2 * rows + 2.0 * dim * rows**2 + rows**3 / 3.0


def schmidt_update_flops(active_dim, dim, rows):
    return (
        2.0 * dim**2 * rows
        + 2.0 * dim * rows**2
        + rows**3 / 3.0
        + 2.0 * active_dim * rows * dim
        + 2.0 * active_dim**2 * rows
    )


def compressed_update_flops(local_dim, rows, epoch_dim=None):
    """
    Depends on the local and epoch dimensions only, never on the global one
    """
    if epoch_dim is None:
        epoch_dim = local_dim
    filter_cost = 4.0 * local_dim**2 * rows + 2.0 * local_dim * rows**2 + rows**3 / 3.0
    accumulator_cost = (
        2.0 * rows * local_dim * epoch_dim
        + 2.0 * rows**2 * epoch_dim
        + 2.0 * rows * epoch_dim**2
        + 2.0 * local_dim * rows * epoch_dim
    )
    return filter_cost + accumulator_cost


def recovery_flops(local_dim, epoch_dim, global_dim):
    return (
        2.0 * local_dim * epoch_dim * global_dim
        + 2.0 * epoch_dim**2 * global_dim
        + 2.0 * epoch_dim * global_dim**2
        + 2.0 * epoch_dim * global_dim
    )


def _full_width_block(block, dim):
    if block.width > dim:
        raise DimensionMismatch(f"block spans {block.width} columns, state has {dim}")
    return block.padded(dim) if block.width < dim else block


def full_update(state, cov, block):
    """
    Standard EKF update of the whole state, Joseph-form covariance
    """
    block = _full_width_block(block, state.error_dim)
    P = cov.full()
    dx, P_post, chi2 = ekf_correction(P, block.H, block.residual, block.noise_cov)
    state = apply_correction(state, dx)
    report = UpdateReport(block.rows, chi2, dense_update_flops(state.error_dim, block.rows))
    return state, PartitionedCovariance.from_full(P_post, state.local_dim), report


def schmidt_update(state, cov, block):
    """
    Consider update: keyframes keep their mean and marginal covariance, the
    active part (IMU and clones) and its cross terms are corrected
    """
    block = _full_width_block(block, state.error_dim)
    P = cov.full()
    H, r = block.H, block.residual
    A = slice(0, state.active_dim)
    S_cols = slice(state.active_dim, state.error_dim)

    S, cho = _innovation(H, P, block.noise_cov)
    K_A = scipy.linalg.cho_solve(cho, (P[A, :] @ H.T).T).T
    P_post = P.copy()
    P_post[A, A] = P[A, A] - K_A @ S @ K_A.T
    P_post[A, S_cols] = P[A, S_cols] - K_A @ (H @ P[:, S_cols])
    P_post[S_cols, A] = P_post[A, S_cols].T

    dx = np.zeros(state.error_dim)
    dx[A] = K_A @ r
    state = apply_correction(state, dx)
    chi2 = float(r @ scipy.linalg.cho_solve(cho, r))
    report = UpdateReport(
        block.rows, chi2, schmidt_update_flops(state.active_dim, state.error_dim, block.rows)
    )
    return state, PartitionedCovariance.from_full(symmetrize(P_post), state.local_dim), report


def compressed_update(state, cov, block, accumulator):
    """
    EKF update of the local partition only.

    The global mean, P_LG and P_GG are left untouched; the update is folded
    into `accumulator` (modified in place) for a later recover_global.
    """
    dL = state.local_dim
    block = block.local(dL)
    if accumulator.local_dim != dL or cov.local_dim != dL:
        raise DimensionMismatch(
            f"accumulator {accumulator.local_dim} / covariance {cov.local_dim} rows, "
            f"local state {dL}"
        )
    H, r = block.H, block.residual
    flops = compressed_update_flops(dL, block.rows, accumulator.epoch_dim)
    if not np.any(H):
        return state, cov, accumulator, UpdateReport(block.rows, 0.0, flops)

    P = cov.P_LL
    S, cho = _innovation(H, P, block.noise_cov)
    K = scipy.linalg.cho_solve(cho, (P @ H.T).T).T
    P_post = symmetrize(P - K @ S @ K.T)

    B = H @ accumulator.T
    Sinv_r = scipy.linalg.cho_solve(cho, r)
    accumulator.accumulate(B, scipy.linalg.cho_solve(cho, B), Sinv_r, K)

    state = apply_correction(state, K @ r)
    report = UpdateReport(block.rows, float(r @ Sinv_r), flops)
    return state, PartitionedCovariance(P_post, cov.P_LG, cov.P_GG), accumulator, report


def recover_global(state, cov, accumulator):
    """
    Apply the deferred updates to P_LG, P_GG and the global mean.

    Returns (state, cov, accumulator) with a fresh accumulator; the inputs
    are not modified.
    """
    if accumulator.local_dim != state.local_dim or cov.local_dim != state.local_dim:
        raise DimensionMismatch(
            f"accumulator has {accumulator.local_dim} rows, local state {state.local_dim}"
        )
    if cov.P_LG.shape[0] != accumulator.epoch_dim:
        raise DimensionMismatch(
            f"P_LG has {cov.P_LG.shape[0]} rows, accumulator epoch dim {accumulator.epoch_dim}"
        )
    if accumulator.is_reset():
        return state, cov, accumulator

    P_LG0 = cov.P_LG
    P_LG = accumulator.T @ P_LG0
    P_GG = symmetrize(cov.P_GG - P_LG0.T @ accumulator.Y @ P_LG0)
    if state.global_dim:
        state = apply_global_correction(state, P_LG0.T @ accumulator.u)
    _LOGGER.debug(
        f"recovered {state.global_dim} global columns from epoch of {accumulator.epoch_dim}"
    )
    return (
        state,
        PartitionedCovariance(cov.P_LL.copy(), P_LG, P_GG),
        CompressedAccumulator.reset(state.local_dim),
    )
