"""
compsym Session Management.

This module provides the Session class that owns the shared configuration
of a run: the seeded random generator and the worker count.
"""

import logging

import numpy as np

from compsym.abstraction import build_finite_ts
from compsym.certification import check_cert_sampled, verify_alt_sim_sampled
from compsym.composition import verify_composed_sampled
from compsym.synthesis import solve_safety
from compsym.traffic import run_traffic_pipeline

logger = logging.getLogger(__name__)


class Session:
    """
    A session for running toolkit operations reproducibly.

    Every sampled operation started from a session draws from the same
    generator, so a run is determined by its seed.
    """

    def __init__(self, seed=0, workers=1):
        """
        Initialize a new Session object.

        Parameters
        ----------
        seed : int
            Seed of the session's random generator.
        workers : int
            Threads available to table building and synthesis.
        """
        self.seed = int(seed)
        self.workers = int(workers)
        self.rng = np.random.default_rng(self.seed)
        logger.debug("session seed=%d workers=%d", self.seed, self.workers)

    def build_abstraction(self, sub, eta, internal=None, materialize=False):
        return build_finite_ts(sub, eta, internal, materialize=materialize, workers=self.workers)

    def check_certificate(self, sub, cert, count):
        return check_cert_sampled(sub, cert, count, self.rng)

    def verify_alt_sim(self, sub, fts, asc, count):
        return verify_alt_sim_sampled(sub, fts, asc, count, self.rng)

    def verify_network(self, net, netfts, nasc, count):
        return verify_composed_sampled(net, netfts, nasc, count, self.rng)

    def synthesize(self, fts, spec, assumption=None, monotone=None):
        return solve_safety(fts, spec, assumption, monotone=monotone, workers=self.workers)

    def run_traffic(self, params, **kwargs):
        """
        Run the traffic pipeline with this session's generator.

        Returns
        -------
        compsym.traffic.PipelineResult
            The result; its report records the seed.
        """
        kwargs.setdefault('workers', self.workers)
        result = run_traffic_pipeline(params, self.rng, **kwargs)
        result.report['seed'] = self.seed
        return result
