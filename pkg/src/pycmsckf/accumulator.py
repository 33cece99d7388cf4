"""
Deferred global-update record of the compressed filter.

Between two recoveries the local-global cross covariance is kept at its
epoch-start value P_LG(0) and the local updates are summarized by

    P_LG(k) = T @ P_LG(0)
    P_GG(k) = P_GG(0) - P_LG(0).T @ Y @ P_LG(0)
    x_G(k)  = x_G(0) [+] P_LG(0).T @ u

T has one row per current local error-state coordinate and one column per
local coordinate at the start of the epoch, so augmenting or marginalizing
local blocks only changes its row count.
"""

import numpy as np

from pycmsckf.errors import DimensionMismatch


class CompressedAccumulator:
    def __init__(self, T, Y, u, epoch_dim):
        self.T = T
        self.Y = Y
        self.u = u
        self.epoch_dim = epoch_dim
        self.pending = False

    @classmethod
    def reset(cls, local_dim):
        return cls(
            np.eye(local_dim),
            np.zeros((local_dim, local_dim)),
            np.zeros(local_dim),
            local_dim,
        )

    @property
    def local_dim(self):
        return self.T.shape[0]

    def is_reset(self):
        return not self.pending

    def propagate(self, J, rows):
        """
        T := Jbar @ T where Jbar is J on `rows` and identity elsewhere
        """
        self.T[rows, :] = J @ self.T[rows, :]
        self.pending = True

    def remap_rows(self, index, zero_rows=()):
        """
        Replace T by T[index]; rows listed in zero_rows are zeroed afterwards
        """
        T = self.T[index, :]
        if len(zero_rows):
            T[list(zero_rows), :] = 0.0
        self.T = T
        self.pending = True

    def accumulate(self, B, Sinv_B, Sinv_r, K):
        """
        Fold one local update into the record.

        B = H_L @ T (pre-update), Sinv_B = S^-1 @ B, Sinv_r = S^-1 @ r,
        K = local gain. Y += T' Psi T, u += T' H' S^-1 r, T := (I - K H) T.
        """
        if B.shape[1] != self.epoch_dim:
            raise DimensionMismatch(
                f"accumulator epoch dim {self.epoch_dim}, block maps to {B.shape[1]}"
            )
        Y = self.Y + B.T @ Sinv_B
        self.Y = 0.5 * (Y + Y.T)
        self.u = self.u + B.T @ Sinv_r
        self.T = self.T - K @ B
        self.pending = True

    def __repr__(self):
        return (
            f"CompressedAccumulator(local_dim={self.local_dim}, "
            f"epoch_dim={self.epoch_dim}, pending={self.pending})"
        )
