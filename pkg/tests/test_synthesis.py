#!/usr/bin/env python
# Tests for safety synthesis, refinement and closed-loop simulation

import itertools
import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from compsym.abstraction import build_finite_ts, dwell_scenarios
from compsym.exceptions import DwellViolation, NoWinningStateNearby
from compsym.model import Box, ModeDynamics, NetworkSpec, SwitchedSubsystem
from compsym.synthesis import (
    AbstractController,
    FixedModePolicy,
    RefinedController,
    SafetySpec,
    assumption_points,
    refinement_target,
    simulate_closed_loop,
    solve_safety,
)
from compsym.traffic import GREEN, RED, TrafficParams, build_traffic_network, safe_box


def halving(dwell_time=1):
    """``x' = 0.5 x`` (mode 0) or ``x' = 0.5 x + 0.6`` (mode 1) on ``[0, 1]``."""
    return SwitchedSubsystem(
        id=0,
        modes=(ModeDynamics([[0.5]], [0.0], []), ModeDynamics([[0.5]], [0.6], [])),
        state_domain=(Box([0.0], [1.0]),),
        dwell_time=dwell_time,
    )


def planar(dwell_time=2):
    A = [[0.5, 0.1], [0.0, 0.4]]
    D = [[0.2], [0.1]]
    return SwitchedSubsystem(
        id=0,
        modes=(ModeDynamics(A, [0.0, 0.0], D), ModeDynamics(A, [0.9, 0.6], D)),
        state_domain=(Box([0.0, 0.0], [2.0, 2.0]),),
        internal_domain=(Box([0.0], [1.0]),),
        inputs=((1, 1),),
        dwell_time=dwell_time,
    )


def brute_force_winning(fts, spec, inputs):
    """Naive safety fixed point over explicit successor lists."""
    outputs = fts.grid.points() @ fts.sub.external_output.T
    safe = spec.safe.contains(outputs) if spec.safe is not None else np.zeros(fts.n_x, dtype=bool)
    winning = np.repeat(safe[None, :], fts.layers, axis=0)
    while True:
        updated = winning.copy()
        for p in range(fts.modes):
            for l in range(fts.dwell_time):
                for x in range(fts.n_x):
                    if not winning[fts.layer(p, l), x]:
                        continue
                    aug = int(fts.aug_index(x, p, l))
                    succ = [fts.successors(aug, w) for w in inputs]
                    ok = False
                    for q, lq in dwell_scenarios(p, l, fts.modes, fts.dwell_time):
                        good = True
                        for s in succ:
                            if fts.sink in s:
                                good = False
                                break
                            for t in s:
                                state = fts.decode(t)
                                if (state.p, state.l) == (q, lq) and not winning[fts.layer(q, lq), state.x]:
                                    good = False
                                    break
                            if not good:
                                break
                        ok = ok or good
                    updated[fts.layer(p, l), x] = ok
        if np.array_equal(updated, winning):
            return winning
        winning = updated


def random_scalar(a0, b0, a1, b1, dwell_time):
    return SwitchedSubsystem(
        id=0,
        modes=(ModeDynamics([[a0]], [b0], []), ModeDynamics([[a1]], [b1], [])),
        state_domain=(Box([0.0], [0.75]),),
        dwell_time=dwell_time,
    )


def enumerated_winning(fts, spec):
    """Union over every memoryless next-mode policy of the largest set it keeps safe."""
    safe = spec.safe.contains(fts.grid.points() @ fts.sub.external_output.T)
    choices, bad, targets = [], [], []
    for aug in range(fts.n_aug):
        state = fts.decode(aug)
        succ = fts.successors(aug, 0)
        scenarios = dwell_scenarios(state.p, state.l, fts.modes, fts.dwell_time)
        choices.append(range(len(scenarios)))
        bad.append(fts.sink in succ)
        targets.append([[int(t) for t in succ if t != fts.sink
                         and (fts.decode(t).p, fts.decode(t).l) == scenario] for scenario in scenarios])
    best = np.zeros(fts.n_aug, dtype=bool)
    for policy in itertools.product(*choices):
        keep = np.tile(safe, fts.layers)
        changed = True
        while changed:
            changed = False
            for aug in np.flatnonzero(keep):
                if bad[aug] or not keep[targets[aug][policy[aug]]].all():
                    keep[aug] = False
                    changed = True
        best |= keep
    return best.reshape(fts.layers, fts.n_x)


class TestSolveSafety(unittest.TestCase):
    """Maximal controlled invariant sets"""

    def test_everything_winning(self):
        fts = build_finite_ts(halving(), 0.25)
        ctrl = solve_safety(fts, SafetySpec(Box([0.0], [1.0])))
        self.assertEqual(ctrl.size, 10)
        self.assertFalse(ctrl.empty)
        self.assertEqual(ctrl.allowed_modes(4, 1, 0), [0, 1])

    def test_empty_safe_set(self):
        fts = build_finite_ts(halving(), 0.25)
        ctrl = solve_safety(fts, SafetySpec(None))
        self.assertTrue(ctrl.empty)
        self.assertEqual(ctrl.to_dict()['winning_states'], 0)

    def test_switching_forced_by_safety(self):
        fts = build_finite_ts(halving(), 0.25)
        ctrl = solve_safety(fts, SafetySpec(Box([0.0], [0.6])))
        winning = ctrl.winning
        # only mode 0 keeps the state low; states above 0.6 are unsafe
        np.testing.assert_array_equal(winning[0], [True, True, True, False, False])
        self.assertEqual(ctrl.allowed_modes(2, 0, 0), [0])

    def test_matches_brute_force_scalar(self):
        fts = build_finite_ts(halving(dwell_time=2), 0.25)
        spec = SafetySpec(Box([0.0], [0.8]))
        ctrl = solve_safety(fts, spec)
        np.testing.assert_array_equal(ctrl.winning, brute_force_winning(fts, spec, [0]))

    def test_matches_brute_force_planar(self):
        fts = build_finite_ts(planar(), 0.5, 0.5)
        spec = SafetySpec(Box([0.0, 0.0], [1.5, 1.5]))
        ctrl = solve_safety(fts, spec, workers=2)
        np.testing.assert_array_equal(ctrl.winning, brute_force_winning(fts, spec, range(fts.n_w)))

    def test_assumption_restricts_inputs(self):
        fts = build_finite_ts(planar(), 0.5, 0.25)
        selected = assumption_points(fts, Box([0.0], [0.5]), monotone=False)
        np.testing.assert_array_equal(fts.internal_points[selected], [[0.0], [0.25], [0.5]])
        extreme = assumption_points(fts, Box([0.0], [0.5]), monotone=True)
        np.testing.assert_array_equal(fts.internal_points[extreme], [[0.0], [0.5]])

    def test_history_is_nonincreasing(self):
        fts = build_finite_ts(planar(), 0.5, 0.5)
        ctrl = solve_safety(fts, SafetySpec(Box([0.0, 0.0], [1.0, 1.0])))
        self.assertTrue(all(a >= b for a, b in zip(ctrl.history, ctrl.history[1:])))
        self.assertLessEqual(ctrl.iterations, fts.n_aug + 1)

    def test_monotone_matches_full_on_traffic(self):
        params = TrafficParams(links=3, eta=1.0)
        link = build_traffic_network(params).subsystems[0]
        fts = build_finite_ts(link, 1.0, 1.0)
        spec = SafetySpec(safe_box(params))
        assumption = Box([0.0], [29.0])
        fast = solve_safety(fts, spec, assumption, monotone=True)
        full = solve_safety(fts, spec, assumption, monotone=False)
        np.testing.assert_array_equal(fast.winning, full.winning)
        np.testing.assert_array_equal(fast.allowed, full.allowed)

    def test_traffic_link_nonempty(self):
        params = TrafficParams(links=3, eta=0.3)
        link = build_traffic_network(params).subsystems[0]
        fts = build_finite_ts(link, 0.3, 0.3)
        ctrl = solve_safety(fts, SafetySpec(Box([0.0, 0.0], [30.0, 30.0])), Box([0.0], [30.0]))
        self.assertFalse(ctrl.empty)
        zero = int(fts.grid.nearest([0.0, 0.0])[0])
        self.assertTrue(ctrl.is_winning(zero, RED, 0))
        self.assertIn(GREEN, ctrl.allowed_modes(zero, RED, 0))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(min_value=-0.9, max_value=0.9), st.floats(min_value=-0.5, max_value=1.0),
           st.floats(min_value=-0.9, max_value=0.9), st.floats(min_value=-0.5, max_value=1.0),
           st.integers(min_value=1, max_value=2), st.integers(min_value=0, max_value=3),
           st.integers(min_value=0, max_value=3))
    def test_matches_policy_enumeration(self, a0, b0, a1, b1, dwell_time, first, second):
        fts = build_finite_ts(random_scalar(a0, b0, a1, b1, dwell_time), 0.25)
        lo, hi = sorted((first, second))
        spec = SafetySpec(Box([0.25 * lo], [0.25 * hi]))
        ctrl = solve_safety(fts, spec)
        np.testing.assert_array_equal(ctrl.winning, enumerated_winning(fts, spec))

    def test_adversarial_environment_stays_winning(self):
        fts = build_finite_ts(planar(), 0.5, 0.5)
        ctrl = solve_safety(fts, SafetySpec(Box([0.0, 0.0], [1.5, 1.5])))
        self.assertFalse(ctrl.empty)
        for layer, x in zip(*np.nonzero(ctrl.winning)):
            p, l = divmod(int(layer), fts.dwell_time)
            aug = int(fts.aug_index(x, p, l))
            for q in ctrl.allowed_modes(int(x), p, l):
                lq = [s for r, s in dwell_scenarios(p, l, fts.modes, fts.dwell_time) if r == q][0]
                for w in range(fts.n_w):
                    succ = fts.successors(aug, w)
                    self.assertNotIn(fts.sink, succ)
                    for t in succ:
                        state = fts.decode(t)
                        if (state.p, state.l) == (q, lq):
                            self.assertTrue(ctrl.is_winning(state.x, q, lq))

    def test_adversarial_plays_stay_safe(self):
        fts = build_finite_ts(planar(), 0.5, 0.5)
        safe = Box([0.0, 0.0], [1.5, 1.5])
        ctrl = solve_safety(fts, SafetySpec(safe))
        rng = np.random.default_rng(7)
        starts = np.flatnonzero(ctrl.winning[0])
        for start in rng.choice(starts, size=min(10, starts.size), replace=False):
            x, p, l = int(start), 0, 0
            for _ in range(100):
                self.assertTrue(safe.contains(fts.grid.coords([x])[0]))
                modes = ctrl.allowed_modes(x, p, l)
                q = int(rng.choice(modes))
                lq = [s for r, s in dwell_scenarios(p, l, fts.modes, fts.dwell_time) if r == q][0]
                succ = fts.successors(int(fts.aug_index(x, p, l)), int(rng.integers(fts.n_w)))
                layer = [fts.decode(t).x for t in succ if (fts.decode(t).p, fts.decode(t).l) == (q, lq)]
                x, p, l = int(rng.choice(layer)), q, lq


class TestRefinedController(unittest.TestCase):
    """Concrete policies from abstract controllers"""

    def setUp(self):
        self.fts = build_finite_ts(halving(), 0.25)
        self.ctrl = solve_safety(self.fts, SafetySpec(Box([0.0], [1.0])))

    def test_exact_grid_point(self):
        refined = RefinedController(self.ctrl, self.fts, 0.0)
        self.assertEqual(refined.locate([0.5], 0, 0), 2)

    def test_nearest_traffic_point(self):
        link = build_traffic_network(TrafficParams(links=3)).subsystems[0]
        fts = build_finite_ts(link, 0.03, [[0.0]])
        ctrl = AbstractController(2, 1, np.ones((2, fts.n_x), dtype=bool),
                                  np.ones((2, 2, fts.n_x), dtype=bool))
        idx = RefinedController(ctrl, fts, 0.03).locate([12.01, 0.01], RED, 0)
        np.testing.assert_allclose(fts.grid.coords([idx])[0], [12.0, 0.0])

    def test_falls_back_to_winning_neighbour(self):
        winning = np.zeros((2, 5), dtype=bool)
        winning[:, 1] = True
        ctrl = AbstractController(2, 1, winning, np.zeros((2, 2, 5), dtype=bool))
        refined = RefinedController(ctrl, self.fts, 0.3)
        self.assertEqual(refined.locate([0.45], 0, 0), 1)

    def test_no_winning_point_nearby(self):
        winning = np.zeros((2, 5), dtype=bool)
        winning[:, 0] = True
        ctrl = AbstractController(2, 1, winning, np.zeros((2, 2, 5), dtype=bool))
        refined = RefinedController(ctrl, self.fts, 0.25)
        with self.assertRaises(NoWinningStateNearby):
            refined.locate([1.0], 0, 0)

    def test_mode_preference(self):
        low = RefinedController(self.ctrl, self.fts, 0.0)
        high = RefinedController(self.ctrl, self.fts, 0.0, preference='highest')
        self.assertEqual(low.next_mode([0.5], 0, 0), 0)
        self.assertEqual(high.next_mode([0.5], 0, 0), 1)
        self.assertEqual(high.initial_mode([0.5]), 1)

    def test_nearest_point_beyond_radius_is_rejected(self):
        refined = RefinedController(self.ctrl, self.fts, 0.25)
        with self.assertRaises(NoWinningStateNearby):
            refined.locate([5.0], 0, 0)
        self.assertEqual(refined.locate([1.1], 0, 0), 4)

    def test_guarantee_inflates_the_target(self):
        target = refinement_target(Box([-1.0], [1.0]), 0.25)
        np.testing.assert_allclose([target.lower, target.upper], [[-0.75], [0.75]])
        refined = RefinedController(self.ctrl, self.fts, 0.25, target=target)
        np.testing.assert_allclose([refined.guarantee.lower, refined.guarantee.upper], [[-1.0], [1.0]])
        self.assertIsNone(RefinedController(self.ctrl, self.fts, 0.25).guarantee)

    def test_refinement_target_sides(self):
        self.assertIsNone(refinement_target(Box([0.0], [0.4]), 0.25))
        self.assertIsNone(refinement_target(None, 0.25))
        upper_only = refinement_target(Box([0.0], [0.4]), 0.25, lower=False)
        np.testing.assert_allclose([upper_only.lower, upper_only.upper], [[0.0], [0.15]])


class TestClosedLoop(unittest.TestCase):
    """Synchronous simulation of the concrete network"""

    def setUp(self):
        self.net = build_traffic_network(TrafficParams(links=3))

    def test_zero_horizon(self):
        result = simulate_closed_loop(self.net, [FixedModePolicy(RED)] * 3, [np.zeros(2)] * 3, 0)
        self.assertEqual(result.rows, [])
        self.assertTrue(result.passed)

    def test_red_lights_drain_the_road(self):
        safe = [Box([0.0, 0.0], [30.0, 30.0])] * 3
        result = simulate_closed_loop(self.net, [FixedModePolicy(RED)] * 3,
                                      [np.full(2, 10.0)] * 3, 200, safe)
        self.assertTrue(result.passed)
        self.assertEqual(len(result.rows), 600)
        self.assertLess(result.states(0)[-1].max(), 1e-6)
        self.assertEqual(result.rows[0], (0, 0, [10.0, 10.0], RED))

    def test_early_switch_rejected(self):
        class Alternating:
            def initial_mode(self, x):
                return 0

            def next_mode(self, x, p, l):
                return 1 - p

        sub = halving(dwell_time=2)
        net = NetworkSpec((sub,))
        with self.assertRaises(DwellViolation) as ctx:
            simulate_closed_loop(net, [Alternating()], [np.array([0.5])], 5)
        self.assertEqual(ctx.exception.step, 1)

    def test_refined_failure_records_step(self):
        fts = build_finite_ts(halving(), 0.25)
        winning = np.zeros((2, 5), dtype=bool)
        winning[0, 4] = True
        allowed = np.zeros((2, 2, 5), dtype=bool)
        allowed[0, 0, 4] = True
        ctrl = AbstractController(2, 1, winning, allowed)
        net = NetworkSpec((halving(),))
        with self.assertRaises(NoWinningStateNearby) as ctx:
            simulate_closed_loop(net, [RefinedController(ctrl, fts, 0.1)], [np.array([1.0])], 5)
        self.assertEqual(ctx.exception.step, 1)

    def test_leaving_the_domain_fails_the_verdict(self):
        net = NetworkSpec((halving(),))
        result = simulate_closed_loop(net, [FixedModePolicy(1)], [np.array([1.0])], 5,
                                      [Box([-1.0], [2.0])])
        self.assertFalse(result.passed)
        self.assertEqual(result.failure['step'], 1)
        self.assertEqual(result.failure['subsystem'], 0)
        self.assertEqual(len(result.rows), 1)
        self.assertEqual(result.to_dict()['failure'], result.failure)

    def test_initial_state_outside_the_domain(self):
        net = NetworkSpec((halving(),))
        result = simulate_closed_loop(net, [FixedModePolicy(0)], [np.array([1.5])], 5)
        self.assertFalse(result.passed)
        self.assertEqual(result.failure['step'], 0)
        self.assertEqual(result.rows, [])


if __name__ == "__main__":
    unittest.main()
