#!/usr/bin/env python
# Full-scale run of the 25-link ring road; skipped in CI mode (see conftest.py)

import unittest

import numpy as np

from compsym.traffic import TrafficParams, run_traffic_pipeline


class TestFullScaleTraffic(unittest.TestCase):
    """25 links at the fine quantization"""

    def test_ring_road(self):
        params = TrafficParams(links=25, eta=0.03)
        result = run_traffic_pipeline(params, np.random.default_rng(0), steps=600, samples=10000,
                                      network_samples=1000, symmetry=True, workers=4)
        self.assertTrue(result.passed)
        report = result.report
        self.assertEqual(report['abstraction']['states'], [1001 ** 2] * 25)
        self.assertEqual(report['small_gain']['cycles'], 26)
        self.assertTrue(report['small_gain']['all_below_identity'])
        self.assertLess(report['closed_loop']['max_density'], 30.0)
        self.assertEqual(len(result.trajectory.rows), 600 * 25)


if __name__ == "__main__":
    unittest.main()
