"""
Safety synthesis on finite abstractions and its concrete refinement.

The safety game is played on augmented states ``(x̂, p, l)``. The active
mode is fixed by the state, so the controller's move is the mode ``p'``
committed for the next step among those the dwell counter admits; the
environment picks the internal input from the assumption set and the
successor inside the ``eta``-ball.
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from compsym.abstraction import dwell_scenarios
from compsym.exceptions import ConfigError, DomainViolation, DwellViolation, NoWinningStateNearby, ToolkitError
from compsym.model import DOMAIN_TOL, Box, in_domain

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SafetySpec:
    """Safe box on the external output of one subsystem."""

    safe: Optional[Box]
    horizon: int = 0


@dataclass
class AbstractController:
    """
    Maximal controlled invariant set of a finite abstraction.

    ``winning[layer, x̂]`` marks winning augmented states with
    ``layer = p * k_d + l``; ``allowed[layer, p', x̂]`` marks the next modes
    that keep every successor winning.
    """

    modes: int
    dwell_time: int
    winning: np.ndarray
    allowed: np.ndarray
    iterations: int = 0
    history: List[int] = field(default_factory=list)

    @property
    def empty(self):
        return not bool(self.winning.any())

    @property
    def size(self):
        return int(self.winning.sum())

    def layer(self, p, l):
        return p * self.dwell_time + l

    def is_winning(self, x_idx, p, l):
        return bool(self.winning[self.layer(p, l), x_idx])

    def allowed_modes(self, x_idx, p, l):
        return [int(q) for q in np.flatnonzero(self.allowed[self.layer(p, l), :, x_idx])]

    def to_dict(self):
        return {
            'winning_states': self.size,
            'empty': self.empty,
            'iterations': self.iterations,
            'history': self.history,
        }


def safe_mask(fts, spec):
    """Grid points whose external output lies in the safe box."""
    if spec.safe is None:
        return np.zeros(fts.n_x, dtype=bool)
    outputs = fts.grid.points() @ fts.sub.external_output.T
    return spec.safe.contains(outputs, DOMAIN_TOL)


def assumption_points(fts, assumption, monotone):
    """Indices of internal-input points quantified over during synthesis."""
    points = fts.internal_points
    if fts.sub.q == 0:
        return np.array([0])
    selected = np.arange(points.shape[0])
    if assumption is not None:
        selected = selected[assumption.contains(points, DOMAIN_TOL)]
    if selected.size == 0:
        raise ConfigError("the internal-input assumption holds no abstract input point")
    if monotone:
        chosen = points[selected]
        extreme = np.all((chosen == chosen.min(axis=0)) | (chosen == chosen.max(axis=0)), axis=1)
        selected = selected[extreme]
    return selected


def _summed_area(lattice_values):
    table = lattice_values.astype(np.int64)
    for axis in range(table.ndim):
        table = np.cumsum(table, axis=axis)
    return np.pad(table, [(1, 0)] * table.ndim)


def _box_sums(table, lo, hi):
    """Sums of the lattice over ``[lo, hi]`` per row via inclusion-exclusion."""
    dim = lo.shape[1]
    total = np.zeros(lo.shape[0], dtype=np.int64)
    for corner in itertools.product((0, 1), repeat=dim):
        index = tuple(np.where(corner[a], hi[:, a] + 1, lo[:, a]) for a in range(dim))
        sign = -1 if (dim - sum(corner)) % 2 else 1
        total += sign * table[index]
    return total


def _lattice(fts, dense_values):
    grid = fts.grid
    if grid.dense_to_lattice is None:
        return dense_values.reshape(grid.shape)
    out = np.zeros(grid.lattice_size, dtype=dense_values.dtype)
    out[grid.dense_to_lattice] = dense_values
    return out.reshape(grid.shape)


def _ball_boxes(fts, inputs):
    """Per mode: clipped ball ranges per assumption input and a losing flag for empty balls."""
    states = np.arange(fts.n_x)
    domain = _summed_area(_lattice(fts, np.ones(fts.n_x, dtype=bool)))
    boxes = []
    for p in range(fts.modes):
        ranges, losing = [], np.zeros(fts.n_x, dtype=bool)
        for w_idx in inputs:
            lo, hi, empty = fts.grid.ball_ranges(fts.images(states, p, w_idx))
            lo_c, hi_c = np.where(empty[:, None], 0, lo), np.where(empty[:, None], 0, hi)
            losing |= empty | (_box_sums(domain, lo_c, hi_c) == 0)
            ranges.append((lo_c, hi_c))
        boxes.append((ranges, losing))
    return boxes


def solve_safety(fts, spec, assumption=None, monotone=None, workers=1):
    """
    Greatest controlled invariant subset of the safe states.

    Iterates ``W <- W ∩ Safe ∩ {s : some admissible next mode keeps every
    successor for every assumed internal input inside W}`` from all safe
    states. Each sweep reads only the previous winning set.

    Parameters
    ----------
    fts : FiniteTS
        The abstraction.
    spec : SafetySpec
        Safe box on the external output.
    assumption : Box, optional
        Internal inputs quantified over; defaults to all abstract inputs.
    monotone : bool, optional
        Check only extreme internal inputs; defaults to the subsystem flag.
    workers : int
        Threads evaluating modes in parallel.

    Returns
    -------
    AbstractController
        The winning set and the admissible next modes; ``empty`` reports
        failed synthesis.
    """
    monotone = fts.sub.monotone if monotone is None else monotone
    logger.info('++ solve_safety subsystem=%s states=%d', fts.sub.id, fts.n_aug)
    inputs = assumption_points(fts, assumption, monotone)
    boxes = _ball_boxes(fts, inputs)
    safe = safe_mask(fts, spec)
    kd, m = fts.dwell_time, fts.modes
    winning = np.repeat(safe[None, :], fts.layers, axis=0)
    allowed = np.zeros((fts.layers, m, fts.n_x), dtype=bool)
    history = [int(winning.sum())]

    def targets_for(p, tables):
        ranges, losing = boxes[p]
        keep = {}
        needed = {(p, l) for l in range(1, kd)} | {(p, kd - 1)} | {(q, 0) for q in range(m) if q != p}
        for q, lq in needed:
            table = tables[q * kd + lq]
            ok = ~losing
            for lo, hi in ranges:
                ok &= _box_sums(table, lo, hi) == 0
            keep[(q, lq)] = ok
        return keep

    iterations = 0
    while True:
        iterations += 1
        tables = [_summed_area(_lattice(fts, ~winning[layer])) for layer in range(fts.layers)]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                keeps = list(pool.map(lambda p: targets_for(p, tables), range(m)))
        else:
            keeps = [targets_for(p, tables) for p in range(m)]
        step_allowed = np.zeros_like(allowed)
        for p in range(m):
            for l in range(kd):
                layer = p * kd + l
                for q, lq in dwell_scenarios(p, l, m, kd):
                    step_allowed[layer, q] = keeps[p][(q, lq)]
        updated = winning & safe[None, :] & step_allowed.any(axis=1)
        if np.any(updated & ~winning):
            raise RuntimeError("winning set grew during the safety fixed point")
        history.append(int(updated.sum()))
        allowed = step_allowed & updated[:, None, :]
        if np.array_equal(updated, winning):
            break
        winning = updated
    ctrl = AbstractController(m, kd, winning, allowed, iterations, history)
    if ctrl.empty:
        logger.warning("subsystem %s: empty winning set", fts.sub.id)
    logger.info('-- solve_safety winning=%d iterations=%d', ctrl.size, iterations)
    return ctrl


def refinement_target(safe, eps_hat, lower=True, upper=True):
    """
    Safe box to synthesize for so that a refined controller with radius
    ``eps_hat`` keeps the concrete outputs inside ``safe``.

    ``lower`` and ``upper`` select the sides that get the margin; a side
    the dynamics can never cross may keep its bound. Returns ``None`` when
    the shrunk box is empty.
    """
    if safe is None:
        return None
    target = safe.deflate(eps_hat, lower, upper)
    if target is None:
        logger.warning("safe box %r is empty once shrunk by %g", safe, eps_hat)
    return target


class FixedModePolicy:
    """Policy that never switches."""

    def __init__(self, mode):
        self.mode = mode

    def initial_mode(self, x):
        return self.mode

    def next_mode(self, x, p, l):
        return self.mode


class RefinedController:
    """
    Concrete policy obtained from an abstract controller.

    A concrete state is quantized to its nearest grid point when that point
    is winning and within ``eps_hat``; otherwise the closest winning point
    within ``eps_hat`` is used, measured by ``asc`` when one is supplied.
    Among the allowed next modes the lowest index is chosen, or the highest
    with ``preference='highest'``.

    ``target`` is the safe box the abstract controller was synthesized for
    (see :func:`refinement_target`). While no :class:`NoWinningStateNearby`
    is raised, the concrete outputs stay inside ``guarantee``, the target
    inflated by ``eps_hat``.
    """

    def __init__(self, ctrl, fts, eps_hat, asc=None, preference='lowest', target=None):
        if eps_hat < 0:
            raise ConfigError(f"refinement radius must be nonnegative, got {eps_hat}")
        if preference not in ('lowest', 'highest'):
            raise ConfigError(f"unknown mode preference '{preference}'")
        self.ctrl = ctrl
        self.fts = fts
        self.eps_hat = float(eps_hat)
        self.asc = asc
        self.preference = preference
        self.target = target
        self.guarantee = None if target is None else target.inflate(self.eps_hat)

    def quantize(self, x):
        return int(self.fts.grid.nearest(x)[0])

    def _within(self, distance):
        return distance <= self.eps_hat * (1 + 1e-12) + 1e-12

    def _distance(self, p, l, x, coords):
        if self.asc is None:
            return np.max(np.abs(coords - x), axis=1)
        return self.asc.evaluate(p, l, x[None, :], coords)

    def locate(self, x, p, l):
        """Winning grid index used for the concrete state ``x``."""
        x = np.asarray(x, dtype=float)
        layer = self.ctrl.layer(p, l)
        grid = self.fts.grid
        idx = self.quantize(x)
        if idx >= 0 and self.ctrl.winning[layer, idx]:
            if self._within(np.max(np.abs(grid.coords([idx])[0] - x))):
                return idx
        axes = []
        for a in range(grid.dim):
            lo = int(np.ceil((x[a] - self.eps_hat) / grid.eta - 1e-9)) - grid.kmin[a]
            hi = int(np.floor((x[a] + self.eps_hat) / grid.eta + 1e-9)) - grid.kmin[a]
            axes.append(np.arange(max(lo, 0), min(hi, grid.shape[a] - 1) + 1))
        mesh = np.meshgrid(*axes, indexing='ij')
        candidates = grid.dense_index([m.ravel() for m in mesh])
        candidates = candidates[candidates >= 0]
        candidates = candidates[self.ctrl.winning[layer, candidates]]
        if candidates.size:
            coords = grid.coords(candidates)
            close = self._within(np.max(np.abs(coords - x), axis=1))
            candidates, coords = candidates[close], coords[close]
        if candidates.size == 0:
            raise NoWinningStateNearby(x.tolist(), self.eps_hat)
        return int(candidates[np.argmin(self._distance(p, l, x, coords))])

    def _pick(self, modes):
        return int(modes[0] if self.preference == 'lowest' else modes[-1])

    def initial_mode(self, x):
        """Mode to start in so that ``(x̂0, p, 0)`` is winning."""
        failure = None
        order = range(self.ctrl.modes) if self.preference == 'lowest' else reversed(range(self.ctrl.modes))
        for p in order:
            try:
                self.locate(x, p, 0)
                return p
            except NoWinningStateNearby as exc:
                failure = exc
        raise failure

    def next_mode(self, x, p, l):
        idx = self.locate(x, p, l)
        modes = self.ctrl.allowed_modes(idx, p, l)
        if not modes:
            raise NoWinningStateNearby(np.asarray(x).tolist(), self.eps_hat)
        return self._pick(modes)


@dataclass
class ClosedLoopResult:
    """
    Trajectory rows ``(step, subsystem, state, mode)`` and the safety verdict.

    ``failure`` is set when a state or internal input left its domain; the
    run stops there and the verdict is negative.
    """

    rows: List[tuple]
    passed: bool
    steps: int
    max_violation: float = 0.0
    failure: Optional[dict] = None

    def states(self, subsystem):
        return np.array([row[2] for row in self.rows if row[1] == subsystem])

    def to_dict(self):
        return {'steps': self.steps, 'passed': self.passed, 'rows': len(self.rows),
                'max_violation': self.max_violation, 'failure': self.failure}


def simulate_closed_loop(net, controllers, x0, steps, safe=None):
    """
    Synchronous closed-loop simulation of a network.

    Parameters
    ----------
    net : NetworkSpec
        Concrete network.
    controllers : sequence
        Per-subsystem policies with ``initial_mode`` and ``next_mode``.
    x0 : sequence of array_like
        Initial states.
    steps : int
        Horizon ``K``.
    safe : sequence of Box, optional
        Safe boxes on the external outputs used for the verdict.

    Returns
    -------
    ClosedLoopResult
        Rows for steps ``0 .. K-1`` (state and applied mode); the verdict
        covers states ``0 .. K``. A state leaving its domain ends the run
        with a negative verdict.

    Raises
    ------
    NoWinningStateNearby
        When a controller fails; ``step`` records where.
    """
    if steps == 0:
        return ClosedLoopResult([], True, 0)
    logger.info('++ simulate_closed_loop subsystems=%d steps=%d', net.size, steps)
    states = [np.asarray(x, dtype=float) for x in x0]
    rows = []
    worst = 0.0

    def violation(i, x):
        if safe is None or safe[i] is None:
            return 0.0
        y = net.subsystems[i].external_output @ x
        return float(np.max(np.maximum(safe[i].lower - y, y - safe[i].upper), initial=0.0))

    def stopped(k, subsystem, detail):
        logger.warning("closed loop left the domain at step %d (subsystem %s): %s", k, subsystem, detail)
        failure = {'step': k, 'subsystem': subsystem, 'detail': detail}
        return ClosedLoopResult(rows, False, steps, worst, failure)

    for i, (sub, x) in enumerate(zip(net.subsystems, states)):
        worst = max(worst, violation(i, x))
        if not in_domain(sub.state_domain, x):
            return stopped(0, i, f"initial state {x.tolist()} outside the state domain")
    modes = [ctrl.initial_mode(x) for ctrl, x in zip(controllers, states)]
    dwell = [0] * net.size
    for k in range(steps):
        for i, x in enumerate(states):
            rows.append((k, i, x.tolist(), modes[i]))
        try:
            chosen = [ctrl.next_mode(states[i], modes[i], dwell[i]) for i, ctrl in enumerate(controllers)]
            inputs = [net.internal_input(i, states) for i in range(net.size)]
            states = [sub.step(modes[i], states[i], inputs[i] if sub.q else None)
                      for i, sub in enumerate(net.subsystems)]
        except DomainViolation as exc:
            exc.step = k
            return stopped(k, None, exc.response['Error']['Message'])
        except ToolkitError as exc:
            exc.step = k
            logger.error("closed loop failed at step %d: %s", k, exc)
            raise
        for i, sub in enumerate(net.subsystems):
            kd = sub.dwell_time
            if chosen[i] != modes[i]:
                if dwell[i] != kd - 1:
                    raise DwellViolation(k + 1, kd)
                dwell[i] = 0
            else:
                dwell[i] = min(dwell[i] + 1, kd - 1)
            worst = max(worst, violation(i, states[i]))
        for i, sub in enumerate(net.subsystems):
            if not in_domain(sub.state_domain, states[i]):
                return stopped(k + 1, i, f"state {states[i].tolist()} outside the state domain")
        modes = chosen
    result = ClosedLoopResult(rows, worst <= 0.0, steps, worst)
    logger.info('-- simulate_closed_loop passed=%s', result.passed)
    return result
