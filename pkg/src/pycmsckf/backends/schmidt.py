import logging

from pycmsckf.estimator import Estimator
from pycmsckf.updates import schmidt_update


class SchmidtEstimator(Estimator):
    """
    Keyframes are consider states: their means never move and their
    marginal covariance is only changed by propagation of cross terms
    """

    name = "schmidt"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.logger = logging.getLogger(__name__)
        self.logger.info("Created a SchmidtEstimator instance")

    def apply_block(self, block):
        self.state, self.cov, report = schmidt_update(self.state, self.cov, block)
        return report
