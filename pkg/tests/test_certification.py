#!/usr/bin/env python
# Tests for incremental stability certificates and alternating simulation functions

import dataclasses
import unittest

import numpy as np

from compsym.abstraction import build_finite_ts
from compsym.certification import (
    LyapCert,
    _sample_pairs,
    _sample_tuples,
    build_alt_sim,
    certify_delta_iss_affine,
    check_alt_sim_tuple,
    check_cert_sampled,
    min_dwell_time,
    relation_radius,
    require_passed,
    verify_alt_sim_sampled,
)
from compsym.exceptions import (
    BadEpsilon,
    BadSplitters,
    CertificateRejected,
    DwellTooSmall,
    NotContractive,
)
from compsym.kfn import IDENTITY, ZERO, Linear
from compsym.model import Box, ModeDynamics, SwitchedSubsystem, in_domain
from compsym.traffic import RED, TrafficParams, build_traffic_network

TRAFFIC_SPLITTERS = (0.66, 0.34, 0.0)


def traffic_link():
    return build_traffic_network(TrafficParams(links=3)).subsystems[0]


def traffic_alt_sim(eta):
    link = traffic_link()
    cert = certify_delta_iss_affine(link)
    fts = build_finite_ts(link, eta, eta)
    asc = build_alt_sim(cert, eta, eta, 2.0, link.dwell_time, TRAFFIC_SPLITTERS, link.output_lipschitz)
    return link, fts, asc


def two_weight_subsystem():
    """Switched subsystem certified with one weight vector per mode."""
    D = [[0.2], [0.1]]
    return SwitchedSubsystem(
        id=0,
        modes=(
            ModeDynamics([[0.5, 0.1], [0.0, 0.4]], [1.0, 1.0], D),
            ModeDynamics([[0.3, 0.1], [0.4, 0.2]], [2.0, 0.5], D),
        ),
        state_domain=(Box([0.0, 0.0], [10.0, 10.0]),),
        internal_domain=(Box([0.0], [1.0]),),
        inputs=((1, 1),),
        dwell_time=4,
    )


TWO_WEIGHTS = [np.array([1.0, 1.0]), np.array([2.0, 1.0])]


def two_box_subsystem():
    """Contractive scalar subsystem whose domains are two disjoint intervals."""
    return SwitchedSubsystem(
        id=0,
        modes=(ModeDynamics([[0.5]], [0.0], [[0.1]]),),
        state_domain=(Box([0.0], [1.0]), Box([5.0], [6.0])),
        internal_domain=(Box([0.0], [1.0]), Box([2.0], [3.0])),
        inputs=((1, 1),),
        dwell_time=1,
    )


class TestDeltaISS(unittest.TestCase):
    """Certificates of affine modes"""

    def test_traffic_link(self):
        cert = certify_delta_iss_affine(traffic_link())
        for kappa in cert.kappa:
            self.assertAlmostEqual(kappa, 0.65, places=12)
        for rho in cert.rho:
            self.assertAlmostEqual(rho.linear_slope(), 1.0 / 3.0, places=12)
        self.assertEqual(cert.mu, 1.0)
        self.assertTrue(cert.common)

    def test_expanding_mode(self):
        sub = SwitchedSubsystem(id=0, modes=(ModeDynamics([[1.1]], [0.0], []),),
                                state_domain=(Box([0.0], [1.0]),))
        with self.assertRaises(NotContractive):
            certify_delta_iss_affine(sub)

    def test_per_mode_weights(self):
        cert = certify_delta_iss_affine(two_weight_subsystem(), TWO_WEIGHTS)
        self.assertAlmostEqual(cert.kappa[0], 0.6)
        self.assertAlmostEqual(cert.kappa[1], 0.5)
        self.assertEqual(cert.mu, 2.0)
        self.assertFalse(cert.common)

    def test_sampled_check_passes(self):
        link = traffic_link()
        report = check_cert_sampled(link, certify_delta_iss_affine(link), 10000, np.random.default_rng(0))
        self.assertTrue(report.passed)
        self.assertGreater(report.checked, 10000)

    def test_understated_contraction_is_caught(self):
        link = traffic_link()
        cert = dataclasses.replace(certify_delta_iss_affine(link), kappa=(0.5, 0.5))
        report = check_cert_sampled(link, cert, 100, np.random.default_rng(0))
        self.assertFalse(report.passed)
        self.assertTrue(any(w['check'] == 'contraction' for w in report.witnesses))
        with self.assertRaises(CertificateRejected):
            require_passed(report, 'understated certificate')

    def test_equal_pair_has_zero_value(self):
        cert = certify_delta_iss_affine(traffic_link())
        self.assertEqual(cert.evaluate(0, [3.0, 4.0], [3.0, 4.0]), 0.0)


class TestMinDwellTime(unittest.TestCase):
    """Dwell time bound"""

    def cert(self, mu, kappa):
        return LyapCert((np.ones(1), mu * np.ones(1)), (kappa, kappa), (ZERO, ZERO), mu,
                        (IDENTITY, Linear(mu)), mu == 1.0)

    def test_common_certificate(self):
        self.assertEqual(min_dwell_time(self.cert(1.0, 0.3), 2.0), 1)

    def test_mode_change_factor(self):
        self.assertEqual(min_dwell_time(self.cert(2.0, 0.5), 2.0), 3)

    def test_bad_epsilon(self):
        with self.assertRaises(BadEpsilon):
            min_dwell_time(self.cert(2.0, 0.5), 1.0)


class TestAltSim(unittest.TestCase):
    """Construction of alternating simulation functions"""

    def test_common_function_ignores_counter(self):
        _, _, asc = traffic_alt_sim(0.3)
        x, xhat = np.array([[1.0, 2.0]]), np.array([[1.3, 1.5]])
        for l in (0, 3):
            self.assertAlmostEqual(asc.evaluate(0, l, x, xhat)[0], 0.5)

    def test_traffic_parameters(self):
        _, _, asc = traffic_alt_sim(0.3)
        self.assertAlmostEqual(asc.sigma, 0.65 / 0.66, places=12)
        self.assertAlmostEqual(asc.rho_hat.linear_slope(), (1.0 / 3.0) / 0.34, places=12)
        self.assertAlmostEqual(asc.eps_tilde, 0.3, places=12)
        self.assertTrue(asc.absorbed)

    def test_counter_scaling(self):
        cert = LyapCert((np.ones(1), 2.0 * np.ones(1)), (0.5, 0.5), (ZERO, ZERO), 2.0,
                        (IDENTITY, Linear(2.0)), False)
        asc = build_alt_sim(cert, 0.1, 0.0, 2.0, 3, (0.8, 0.2, 0.0))
        self.assertAlmostEqual(float(asc.scale(0, 2)), 2.0)
        self.assertEqual(asc.evaluate(0, 0, [[0.5]], [[0.5]])[0], 0.0)

    def test_dwell_time_below_bound(self):
        cert = certify_delta_iss_affine(two_weight_subsystem(), TWO_WEIGHTS)
        with self.assertRaises(DwellTooSmall):
            build_alt_sim(cert, 0.5, 0.1, 2.0, 3, (0.8, 0.2, 0.0))

    def test_splitters_too_small_for_contraction(self):
        cert = certify_delta_iss_affine(traffic_link())
        with self.assertRaises(BadSplitters):
            build_alt_sim(cert, 0.3, 0.3, 2.0, 1, (0.5, 0.5, 0.0))
        with self.assertRaises(BadSplitters):
            build_alt_sim(cert, 0.3, 0.3, 2.0, 1, (0.5, 0.2, 0.2))

    def test_relation_radius(self):
        _, _, asc = traffic_alt_sim(0.3)
        self.assertEqual(relation_radius(asc.with_eps_tilde(0.5), IDENTITY), 0.5)
        self.assertEqual(relation_radius(asc.with_eps_tilde(1.0), Linear(2.0)), 0.5)
        self.assertEqual(relation_radius(asc.with_eps_tilde(0.0), Linear(2.0)), 0.0)


class TestAltSimVerification(unittest.TestCase):
    """Sampled falsification of alternating simulation functions"""

    def test_traffic_coarse(self):
        link, fts, asc = traffic_alt_sim(0.3)
        report = verify_alt_sim_sampled(link, fts, asc, 10000, np.random.default_rng(1))
        self.assertEqual(report.violations, 0)
        self.assertLess(report.skipped, report.checked)

    def test_traffic_fine(self):
        link, fts, asc = traffic_alt_sim(0.03)
        report = verify_alt_sim_sampled(link, fts, asc, 2000, np.random.default_rng(2))
        self.assertEqual(report.violations, 0)

    def test_per_mode_weights(self):
        sub = two_weight_subsystem()
        cert = certify_delta_iss_affine(sub, TWO_WEIGHTS)
        fts = build_finite_ts(sub, 0.5, 0.1)
        asc = build_alt_sim(cert, 0.5, 0.1, 2.0, 4, (0.8, 0.2, 0.0))
        report = verify_alt_sim_sampled(sub, fts, asc, 5000, np.random.default_rng(3))
        self.assertEqual(report.violations, 0)

    def test_quantization_error_is_irreducible(self):
        link, fts, asc = traffic_alt_sim(0.3)
        x = np.array([0.3, 0.0])
        x_idx = int(fts.grid.nearest(x)[0])
        verdict = check_alt_sim_tuple(link, fts, asc.with_eps_tilde(0.0), x, RED, 0, x_idx,
                                      w=[0.0], w_idx=0)
        self.assertEqual(verdict.status, 'violation')
        self.assertAlmostEqual(verdict.lhs, 0.13, places=9)
        self.assertEqual(verdict.rhs, 0.0)

    def test_matched_pair(self):
        link, fts, asc = traffic_alt_sim(0.3)
        x = np.array([0.3, 0.0])
        x_idx = int(fts.grid.nearest(x)[0])
        verdict = check_alt_sim_tuple(link, fts, asc, x, RED, 0, x_idx, w=[0.0], w_idx=0)
        self.assertEqual(verdict.status, 'ok')
        self.assertLessEqual(verdict.lhs, asc.eps_tilde)

    def test_samples_cover_every_domain_box(self):
        sub = two_box_subsystem()
        fts = build_finite_ts(sub, 0.25, 0.25)
        X, _, _, _, W, _ = _sample_tuples(sub, fts, 2000, np.random.default_rng(4))
        self.assertTrue(in_domain(sub.state_domain, X).all())
        self.assertTrue(np.any(X[:, 0] >= 5.0))
        self.assertTrue(np.any(X[:, 0] <= 1.0))
        self.assertTrue(np.any(W[:, 0] >= 2.0))
        X, Xh, W, Wh = _sample_pairs(sub, 2000, np.random.default_rng(5))
        self.assertTrue(np.any(Xh[:, 0] >= 5.0))
        self.assertTrue(np.any(Wh[:, 0] >= 2.0))
        self.assertTrue(in_domain(sub.internal_domain, W).all())


if __name__ == "__main__":
    unittest.main()
