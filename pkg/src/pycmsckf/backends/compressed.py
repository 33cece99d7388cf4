import logging

import numpy as np

from pycmsckf.accumulator import CompressedAccumulator
from pycmsckf.estimator import Estimator
from pycmsckf.state import partition_tags, repartition
from pycmsckf.updates import compressed_update, recover_global, recovery_flops


class CompressedEstimator(Estimator):
    """
    Updates touch the local partition only; the global keyframes are
    brought up to date by recover_global when the vehicle leaves the local
    region, when a loop closure needs a global keyframe, and at the end
    """

    name = "compressed"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.logger = logging.getLogger(__name__)
        self.accumulator = CompressedAccumulator.reset(self.state.local_dim)
        self.recoveries = 0
        self.logger.info("Created a CompressedEstimator instance")

    def requires_local_keyframes(self):
        return True

    def apply_block(self, block):
        self.state, self.cov, self.accumulator, report = compressed_update(
            self.state, self.cov, block, self.accumulator
        )
        return report

    def recover(self):
        acc = self.accumulator
        flops = 0.0
        if not acc.is_reset():
            flops = recovery_flops(acc.local_dim, acc.epoch_dim, self.state.global_dim)
        self.state, self.cov, self.accumulator = recover_global(self.state, self.cov, acc)
        self.recoveries += 1
        self._log_op("recover")
        self.logger.info(
            f"recovery {self.recoveries}: {self.state.global_dim} global, "
            f"{self.state.local_dim} local columns"
        )
        return flops

    def wants_recenter(self):
        offset = self.state.imu.position - self.state.local_center
        return np.linalg.norm(offset) > self.config.r_recenter

    def recenter(self, center):
        flops = self.recover()
        center = np.array(center, dtype=float)
        tags = partition_tags(self.state, center, self.config.r_local)
        self.state, self.cov, self.accumulator = repartition(
            self.state, self.cov, self.accumulator, center, self.config.r_local, tags
        )
        self._log_op("repartition", center, tags)
        return flops

    def state_view(self):
        return recover_global(self.state, self.cov, self.accumulator)[0]

    def covariance_view(self):
        return recover_global(self.state, self.cov, self.accumulator)[1].full()
