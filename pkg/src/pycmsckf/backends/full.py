import logging
from dataclasses import replace

import numpy as np

from pycmsckf.estimator import Estimator
from pycmsckf.propagation import propagate_covariance, propagate_mean
from pycmsckf.state import (
    PartitionedCovariance,
    apply_correction,
    apply_global_correction,
    augment_keyframe,
    repartition,
)
from pycmsckf.updates import UpdateReport, dense_update_flops, ekf_correction, full_update


class FullEstimator(Estimator):
    """
    Dense EKF over the whole state.

    In replay mode it is the lockstep twin of another estimator: it consumes
    that estimator's journal (transition blocks, measurement blocks and
    structural changes) and holds back global-mean corrections until the
    twin recovers, so both can be compared entry by entry.
    """

    name = "full"

    def __init__(self, *args, replay=False, **kwargs):
        super().__init__(*args, **kwargs)
        self.logger = logging.getLogger(__name__)
        self.replay_mode = replay
        self.pending_global = np.zeros(0)
        self.logger.info(f"Created a FullEstimator instance (replay={replay})")

    def apply_block(self, block):
        state = self.state
        if not (self.replay_mode and state.global_dim):
            self.state, self.cov, report = full_update(state, self.cov, block)
            return report

        dL = state.local_dim
        block = block.padded(state.error_dim)
        dx, P, chi2 = ekf_correction(self.cov.full(), block.H, block.residual, block.noise_cov)
        if self.pending_global.shape[0] != state.global_dim:
            self.pending_global = np.zeros(state.global_dim)
        self.pending_global = self.pending_global + dx[dL:]
        self.state = apply_correction(state, dx[:dL])
        self.cov = PartitionedCovariance.from_full(P, dL)
        return UpdateReport(block.rows, chi2, dense_update_flops(state.error_dim, block.rows))

    def recover(self):
        if np.any(self.pending_global):
            self.state = apply_global_correction(self.state, self.pending_global)
        self.pending_global = np.zeros(self.state.global_dim)
        return 0.0

    def state_view(self):
        if np.any(self.pending_global):
            return apply_global_correction(self.state, self.pending_global)
        return self.state

    def replay(self, entries):
        """
        Apply journal entries recorded by another estimator
        """
        with self.lock:
            for entry in entries:
                getattr(self, f"_replay_{entry.op}")(*entry.args)

    def _replay_propagate(self, sample, dt, tb):
        imu = propagate_mean(self.state.imu, sample, dt, self.config.gravity)
        self.cov, _ = propagate_covariance(self.cov, tb)
        self.state = replace(self.state, imu=imu)
        self.time += dt

    def _replay_clone(self, timestamp):
        self.add_clone(timestamp)

    def _replay_keyframe(self, timestamp, init_cov):
        self.state, self.cov, _ = augment_keyframe(
            self.state, self.cov, timestamp, self.config.keyframe_interval, init_cov
        )

    def _replay_update(self, block):
        self.apply_block(block)

    def _replay_marginalize(self, ids):
        self.marginalize(ids)

    def _replay_recover(self):
        self.recover()

    def _replay_repartition(self, center, tags):
        self.recover()
        self.state, self.cov, _ = repartition(
            self.state, self.cov, None, center, self.config.r_local, tags
        )
        self.pending_global = np.zeros(self.state.global_dim)
