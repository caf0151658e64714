#!/usr/bin/env python
# Tests for the ring-road network and the end-to-end traffic pipeline

import unittest

import numpy as np

import compsym
from compsym.exceptions import BadSplitters, ConfigError, PipelineError
from compsym.traffic import (
    GREEN,
    RED,
    TrafficParams,
    build_traffic_network,
    link_modes,
    run_traffic_pipeline,
    safe_box,
    synthesis_target,
)


class TestRingRoad(unittest.TestCase):
    """Construction of the ring"""

    def test_link_modes(self):
        red, green = link_modes(TrafficParams())
        np.testing.assert_allclose(red.A, [[0.9 - 1 / 3, 0.0], [1 / 3, 0.65 - 1 / 3]])
        np.testing.assert_array_equal(red.B, [0.0, 0.0])
        np.testing.assert_array_equal(green.B, [12.0, 0.0])
        np.testing.assert_allclose(green.D, [[1 / 3], [0.0]])

    def test_ring_edges(self):
        net = build_traffic_network(TrafficParams(links=4))
        self.assertEqual(net.edges, frozenset({(0, 1), (1, 2), (2, 3), (3, 0)}))
        self.assertEqual(net.subsystems[0].inputs, ((3, 1),))
        self.assertTrue(all(sub.monotone for sub in net.subsystems))

    def test_internal_input_is_upstream_exit_cell(self):
        net = build_traffic_network(TrafficParams(links=3))
        states = [np.array([1.0, 2.0]), np.array([3.0, 4.0]), np.array([5.0, 6.0])]
        np.testing.assert_array_equal(net.internal_input(0, states), [6.0])
        np.testing.assert_array_equal(net.internal_input(1, states), [2.0])

    def test_synthesis_target_shrinks_the_upper_bound(self):
        params = TrafficParams(eta=0.3)
        np.testing.assert_array_equal(safe_box(params).upper, [30.0, 30.0])
        target = synthesis_target(params, 0.3)
        np.testing.assert_allclose(target.upper, [29.7, 29.7])
        np.testing.assert_array_equal(target.lower, [0.0, 0.0])
        self.assertIsNone(synthesis_target(params, 30.0))

    def test_single_link_rejected(self):
        with self.assertRaises(ConfigError):
            build_traffic_network(TrafficParams(links=1))

    def test_outflow_exceeding_keep_fraction_rejected(self):
        with self.assertRaises(ConfigError):
            build_traffic_network(TrafficParams(keep_even=0.3))

    def test_domain_must_cover_safe_set(self):
        with self.assertRaises(ConfigError):
            build_traffic_network(TrafficParams(domain_upper=20.0))


class TestTrafficPipeline(unittest.TestCase):
    """Compositional pipeline on a short ring"""

    @classmethod
    def setUpClass(cls):
        cls.params = TrafficParams(links=3, eta=0.3)
        cls.result = run_traffic_pipeline(cls.params, np.random.default_rng(0), steps=600,
                                          samples=2000, network_samples=300)

    def test_passes(self):
        self.assertTrue(self.result.passed)
        self.assertLess(self.result.report['closed_loop']['max_density'], 30.0)

    def test_certificate_report(self):
        for kappa in self.result.report['certificate']['kappa']:
            np.testing.assert_allclose(kappa, [0.65, 0.65])

    def test_alt_sim_report(self):
        alt_sim = self.result.report['alt_sim']
        np.testing.assert_allclose(alt_sim['sigma'], [0.65 / 0.66] * 3)
        self.assertEqual(len(alt_sim['checks']), 3)
        self.assertTrue(all(check['violations'] == 0 for check in alt_sim['checks']))
        self.assertEqual(len(self.result.report['certificate']['checks']), 3)

    def test_links_share_parameters(self):
        certificate, alt_sim = self.result.report['certificate'], self.result.report['alt_sim']
        for key, report in (('kappa', certificate), ('rho', certificate), ('eps_tilde', alt_sim)):
            self.assertTrue(all(value == report[key][0] for value in report[key]), key)

    def test_refinement_radius_is_the_quantization(self):
        refine = self.result.report['refine']
        np.testing.assert_allclose(refine['eps_hat'], [0.3] * 3)
        for guarantee in refine['guarantee']:
            np.testing.assert_allclose(guarantee['upper'], [30.0, 30.0])

    def test_trajectory_follows_the_abstract_controller(self):
        trajectory = self.result.trajectory
        for i, controller in enumerate(self.result.controllers):
            kd = controller.ctrl.dwell_time
            rows = [row for row in trajectory.rows if row[1] == i]
            dwell = 0
            for previous, row in zip([None] + rows, rows):
                if previous is not None:
                    dwell = 0 if row[3] != previous[3] else min(dwell + 1, kd - 1)
                x = np.array(row[2])
                idx = controller.locate(x, row[3], dwell)
                self.assertTrue(controller.ctrl.winning[controller.ctrl.layer(row[3], dwell), idx])
                point = controller.fts.grid.coords([idx])[0]
                self.assertLessEqual(np.max(np.abs(point - x)), controller.eps_hat + 1e-9)
                self.assertTrue(controller.guarantee.contains(x, 1e-9))

    def test_small_gain_report(self):
        small_gain = self.result.report['small_gain']
        self.assertTrue(small_gain['passed'])
        self.assertTrue(small_gain['all_below_identity'])

    def test_trajectory_shape(self):
        trajectory = self.result.trajectory
        self.assertEqual(len(trajectory.rows), 600 * 3)
        self.assertTrue({row[3] for row in trajectory.rows} <= {RED, GREEN})
        self.assertEqual(len(self.result.controllers), 3)

    def test_stage_timings(self):
        self.assertEqual(set(self.result.report['timings']),
                         {'build', 'certify', 'abstract', 'alt_sim', 'small_gain', 'compose',
                          'synthesize', 'refine', 'simulate'})


class TestPipelineVariants(unittest.TestCase):
    """Options and failures of the pipeline"""

    def test_symmetric_links_share_abstraction(self):
        params = TrafficParams(links=3, eta=0.3)
        result = run_traffic_pipeline(params, np.random.default_rng(1), steps=50, samples=500,
                                      network_samples=100, symmetry=True)
        self.assertTrue(result.passed)
        first = result.controllers[0].ctrl
        self.assertTrue(all(c.ctrl is first for c in result.controllers))
        self.assertEqual(len(result.report['alt_sim']['checks']), 1)

    def test_five_links_fine_grid(self):
        params = TrafficParams(links=5, eta=0.1)
        result = run_traffic_pipeline(params, np.random.default_rng(3), steps=600, samples=1000,
                                      network_samples=200)
        self.assertTrue(result.passed)
        self.assertEqual(len(result.trajectory.rows), 600 * 5)
        self.assertLess(result.report['closed_loop']['max_density'], 30.0)

    def test_relation_radius_too_large_for_the_safe_set(self):
        params = TrafficParams(links=3, eta=0.3, splitters=(0.66, 0.335, 0.005))
        result = run_traffic_pipeline(params, np.random.default_rng(4), steps=50, samples=500,
                                      network_samples=100)
        self.assertFalse(result.passed)
        self.assertTrue(result.report['synthesis']['empty'])
        self.assertEqual(result.report['synthesis']['targets'], [None] * 3)
        self.assertGreaterEqual(min(result.report['alt_sim']['eps_hat']), 59.0)

    def test_empty_road(self):
        params = TrafficParams(links=3, eta=0.3)
        x0 = [np.zeros(2)] * 3
        result = run_traffic_pipeline(params, np.random.default_rng(2), steps=50, samples=500,
                                      network_samples=100, x0=x0)
        self.assertTrue(result.passed)
        self.assertEqual(result.trajectory.rows[0][2], [0.0, 0.0])

    def test_bad_splitters_name_the_stage(self):
        params = TrafficParams(links=3, eta=0.3, splitters=(0.5, 0.5, 0.0))
        with self.assertRaises(PipelineError) as ctx:
            run_traffic_pipeline(params, np.random.default_rng(0), steps=10, samples=100,
                                 network_samples=10)
        self.assertEqual(ctx.exception.stage, 'alt_sim')
        self.assertIsInstance(ctx.exception.cause, BadSplitters)
        self.assertEqual(ctx.exception.response['Category'], 'BUILD')

    def test_session_records_seed(self):
        session = compsym.session(seed=9)
        result = session.run_traffic(TrafficParams(links=3, eta=0.3), steps=0, samples=200,
                                     network_samples=50)
        self.assertEqual(result.report['seed'], 9)
        self.assertTrue(result.passed)
        self.assertEqual(result.trajectory.rows, [])

    def test_session_rejects_no_workers(self):
        with self.assertRaises(ValueError):
            compsym.session(workers=0)


if __name__ == "__main__":
    unittest.main()
