"""
Compositional reasoning over networks of abstracted subsystems.

Gains between subsystems are collected into a matrix of K-infinity
functions; the small-gain condition asks every cycle of the gain digraph to
compose to a function below the identity. For linear gains the scaling
``delta_i = lambda_i Id`` comes from a max-plus fixed point, and the network
simulation function is ``max_i S_i / lambda_i``.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import networkx as nx
import numpy as np

from compsym.certification import FalsificationReport, successor_margin, exceeds_tolerance
from compsym.exceptions import (
    CouplingMismatch,
    CycleExplosion,
    NonLinearGains,
    SmallGainViolated,
)
from compsym.kfn import DEFAULT_SAMPLES, ZERO, KFn, Linear, compose_chain, lt_identity
from compsym.model import in_domain, sample_boxes

logger = logging.getLogger(__name__)

CYCLE_BUDGET = 10 ** 6
DELTA_SLACK = 0.25


@dataclass(frozen=True, eq=False)
class GainMatrix:
    """Square matrix of gains ``gamma_ij`` (row ``i`` is influenced by ``j``)."""

    entries: Tuple[Tuple[KFn, ...], ...]

    @property
    def size(self):
        return len(self.entries)

    def __getitem__(self, index):
        i, j = index
        return self.entries[i][j]

    @property
    def is_linear(self):
        return all(g.is_linear for row in self.entries for g in row)

    def slopes(self):
        """Slope matrix; raises :class:`NonLinearGains` on a nonlinear entry."""
        out = np.zeros((self.size, self.size))
        for i, row in enumerate(self.entries):
            for j, g in enumerate(row):
                slope = g.linear_slope()
                if slope is None:
                    raise NonLinearGains(i, j)
                out[i, j] = slope
        return out

    def digraph(self):
        graph = nx.DiGraph()
        graph.add_nodes_from(range(self.size))
        for i, row in enumerate(self.entries):
            for j, g in enumerate(row):
                if not g.is_zero:
                    graph.add_edge(i, j)
        return graph

    def to_dict(self):
        return {'entries': [[g.to_dict() for g in row] for row in self.entries]}

    @classmethod
    def from_slopes(cls, slopes):
        return cls(tuple(tuple(Linear(float(s)) for s in row) for row in np.asarray(slopes, dtype=float)))


def gain_matrix(ascs, edges):
    """
    Assemble ``gamma_ii = sigma_i Id`` and ``gamma_ij = rho_hat_i ∘ alpha_j^-1``.

    Parameters
    ----------
    ascs : sequence of AltSimCert
        One certificate per subsystem, in subsystem order.
    edges : iterable of (int, int)
        Edges ``(j, i)``: subsystem ``j`` feeds subsystem ``i``.

    Returns
    -------
    GainMatrix
        Gains; entries without an edge are zero.
    """
    size = len(ascs)
    rows = [[ZERO] * size for _ in range(size)]
    for i, asc in enumerate(ascs):
        rows[i][i] = Linear(asc.sigma)
    for j, i in edges:
        gain = ascs[i].rho_hat.compose(ascs[j].alpha.inverse())
        slope = gain.linear_slope()
        rows[i][j] = Linear(slope) if slope is not None else gain
    return GainMatrix(tuple(tuple(row) for row in rows))


@dataclass
class CycleVerdict:
    cycle: List[int]
    holds: bool
    slope: Optional[float] = None
    witness: Optional[float] = None

    def to_dict(self):
        return {'cycle': self.cycle, 'holds': self.holds, 'slope': self.slope, 'witness': self.witness}


@dataclass
class SmallGainReport:
    """Cycle verdicts of the small-gain check plus the scaling when it passes."""

    passed: bool
    method: str
    cycles: int
    failures: List[CycleVerdict] = field(default_factory=list)
    max_cycle_gain: Optional[float] = None
    deltas: Optional[List[float]] = None
    theta: Optional[float] = None

    def require(self):
        if not self.passed:
            worst = self.failures[0] if self.failures else CycleVerdict([], False, self.max_cycle_gain)
            raise SmallGainViolated(worst.cycle, worst.slope if worst.slope is not None else math.inf)
        return self

    def to_dict(self):
        return {
            'passed': self.passed,
            'method': self.method,
            'cycles': self.cycles,
            'failures': [f.to_dict() for f in self.failures],
            'max_cycle_gain': self.max_cycle_gain,
            'deltas': self.deltas,
            'theta': self.theta,
        }


def max_cycle_mean(weights):
    """
    Largest mean edge weight over all cycles (Karp), ``-inf`` when acyclic.

    Parameters
    ----------
    weights : numpy.ndarray
        Square matrix; ``-inf`` marks a missing edge ``i -> j``.
    """
    n = weights.shape[0]
    if n == 0:
        return -math.inf
    walks = np.full((n + 1, n), -np.inf)
    walks[0] = 0.0
    for k in range(1, n + 1):
        # best walk of k edges ending in v: max over u of walks[k-1][u] + w(u, v)
        walks[k] = np.max(walks[k - 1][:, None] + weights, axis=0)
    best = -math.inf
    with np.errstate(invalid='ignore'):
        for v in range(n):
            if walks[n, v] == -np.inf:
                continue
            ratios = [(walks[n, v] - walks[k, v]) / (n - k)
                      for k in range(n) if walks[k, v] > -np.inf]
            best = max(best, min(ratios))
    return best


def _log_slopes(slopes):
    with np.errstate(divide='ignore'):
        return np.where(slopes > 0, np.log(np.where(slopes > 0, slopes, 1.0)), -np.inf)


def max_cycle_gain(slopes):
    """Largest geometric-mean slope over all cycles; ``0`` when acyclic."""
    mean = max_cycle_mean(_log_slopes(np.asarray(slopes, dtype=float)))
    return 0.0 if mean == -math.inf else math.exp(mean)


def check_small_gain(gm, budget=CYCLE_BUDGET, samples=DEFAULT_SAMPLES):
    """
    Check that every cycle of the gain digraph composes below the identity.

    Simple cycles (self-loops included) are enumerated with networkx up to
    ``budget``; past it, all-linear matrices are decided by the maximum
    cycle mean of the log slopes.

    Parameters
    ----------
    gm : GainMatrix
        The gains.
    budget : int
        Maximum number of enumerated cycles.
    samples : SampleGrid
        Sample set for nonlinear comparisons.

    Returns
    -------
    SmallGainReport
        Verdicts; failures carry the cycle and a witness argument.

    Raises
    ------
    CycleExplosion
        When the budget is exceeded and some gain is nonlinear.
    """
    logger.info('++ check_small_gain size=%d', gm.size)
    graph = gm.digraph()
    cycles = list(itertools.islice(nx.simple_cycles(graph), budget + 1))
    linear = gm.is_linear
    peak = max_cycle_gain(gm.slopes()) if linear else None
    if len(cycles) > budget:
        if not linear:
            raise CycleExplosion(budget)
        report = SmallGainReport(peak < 1.0, 'cycle-mean', len(cycles), max_cycle_gain=peak)
        logger.info('-- check_small_gain passed=%s (cycle-mean fallback)', report.passed)
        return report

    failures = []
    for cycle in cycles:
        chain = [gm[cycle[k], cycle[(k + 1) % len(cycle)]] for k in range(len(cycle))]
        composed = compose_chain(chain)
        verdict = lt_identity(composed, samples)
        if not verdict.holds:
            form = composed.power_form()
            failures.append(CycleVerdict(
                [int(c) for c in cycle], False,
                form[0] if form is not None and form[1] == 1.0 else None, verdict.witness))
    report = SmallGainReport(not failures, 'enumeration', len(cycles), failures, peak)
    logger.info('-- check_small_gain cycles=%d passed=%s', len(cycles), report.passed)
    return report


@dataclass
class Deltas:
    """Scalings ``delta_i = lambdas[i] Id`` with contraction ``theta``."""

    lambdas: np.ndarray
    theta: float


def compute_deltas(gm):
    """
    Scalings that turn the gain matrix into a weighted contraction.

    Finds ``lambda_i >= 1`` with ``max_j g_ij lambda_j <= theta lambda_i`` and
    ``theta < 1`` by iterating ``lambda <- max(1, (G / theta*) ⊗ lambda)`` in
    max-times algebra, where ``theta*`` lies strictly between the maximum
    cycle gain and one.

    Raises
    ------
    NonLinearGains
        When an entry is not linear.
    SmallGainViolated
        When some cycle gain is not below one.
    """
    slopes = gm.slopes()
    n = gm.size
    peak = max_cycle_gain(slopes)
    if peak >= 1.0:
        raise SmallGainViolated([], peak)
    target = peak + (1.0 - peak) * DELTA_SLACK
    scaled = slopes / target
    lambdas = np.ones(n)
    for _ in range(n + 1):
        updated = np.maximum(1.0, np.max(scaled * lambdas[None, :], axis=1))
        if np.array_equal(updated, lambdas):
            break
        lambdas = updated
    else:
        raise SmallGainViolated([], peak)
    theta = float(np.max(slopes * lambdas[None, :] / lambdas[:, None])) * (1.0 + 1e-12) if n else 0.0
    if theta >= 1.0:
        raise SmallGainViolated([], theta)
    logger.debug("deltas: lambda range [%g, %g], theta=%g", lambdas.min(), lambdas.max(), theta)
    return Deltas(lambdas, theta)


@dataclass(frozen=True, eq=False)
class NetworkAltSim:
    """
    Alternating simulation function ``max_i S_i / lambda_i`` of a network.

    The network has no internal input, so only ``sigma`` and ``eps_tilde``
    appear in its transition inequality.
    """

    components: Tuple
    lambdas: np.ndarray
    sigma: float
    eps_tilde: float
    alpha_slope: float

    @property
    def alpha(self):
        return Linear(self.alpha_slope)

    @property
    def eps_hat(self):
        return 0.0 if self.eps_tilde == 0.0 else float(self.alpha.inverse()(self.eps_tilde))

    def evaluate(self, P, L, X, Xh):
        """Evaluate on per-subsystem batches ``P[i], L[i], X[i], Xh[i]``."""
        values = [asc.evaluate(P[i], L[i], X[i], Xh[i]) / self.lambdas[i]
                  for i, asc in enumerate(self.components)]
        return np.maximum.reduce(values)

    def with_eps_tilde(self, eps_tilde):
        return NetworkAltSim(self.components, self.lambdas, self.sigma, eps_tilde, self.alpha_slope)

    def to_dict(self):
        return {
            'lambdas': self.lambdas.tolist(),
            'sigma': self.sigma,
            'eps_tilde': self.eps_tilde,
            'alpha': self.alpha.to_dict(),
            'eps_hat': self.eps_hat,
        }


def composed_alt_sim(ascs, deltas):
    """
    Network alternating simulation function from local ones.

    Couplings are exact (``ŵ_ij = C_ji x̂_j``), so the network offset is
    ``max_i eps_tilde_i / lambda_i`` and the output bound is
    ``min_i alpha_i / lambda_i``.
    """
    lambdas = np.asarray(deltas.lambdas, dtype=float)
    slopes = []
    for i, asc in enumerate(ascs):
        slope = asc.alpha.linear_slope()
        if slope is None:
            raise NonLinearGains(i, i)
        slopes.append(slope / lambdas[i])
    eps_tilde = max(asc.eps_tilde / lam for asc, lam in zip(ascs, lambdas))
    return NetworkAltSim(tuple(ascs), lambdas, float(deltas.theta), float(eps_tilde), float(min(slopes)))


def apply_block(C, X):
    """``X @ C.T`` summed in a fixed order so batches and single rows agree bitwise."""
    X = np.atleast_2d(X)
    out = np.empty((X.shape[0], C.shape[0]))
    for r in range(C.shape[0]):
        acc = C[r, 0] * X[:, 0]
        for c in range(1, C.shape[1]):
            acc = acc + C[r, c] * X[:, c]
        out[:, r] = acc
    return out


def _row_keys(points):
    return [np.ascontiguousarray(row).tobytes() for row in points]


def coupled_internal_points(net, grids, i):
    """
    Internal-input points of subsystem ``i`` induced by its neighbours' grids.

    The list is the product over input blocks of the distinct values
    ``C_ji x̂_j`` for ``x̂_j`` in the grid of subsystem ``j``.
    """
    sub = net.subsystems[i]
    blocks = []
    for source, _ in sub.inputs:
        image = apply_block(net.subsystems[source].outputs[i], grids[source].points())
        blocks.append(np.unique(image, axis=0))
    if not blocks:
        return np.zeros((1, 0))
    rows = [np.concatenate(parts) for parts in itertools.product(*blocks)]
    return np.asarray(rows)


class NetworkFiniteTS:
    """
    Synchronous product of finite abstractions with exact output coupling.

    Product states are tuples of augmented indices; each component moves
    with ``ŵ_i`` stacked from ``C_ji x̂_j`` of its neighbours at the current
    product state and with its own mode as external input.
    """

    def __init__(self, net, components):
        self.net = net
        self.components = tuple(components)
        self._lookup = []
        for fts in self.components:
            self._lookup.append({key: k for k, key in enumerate(_row_keys(fts.internal_points))})

    @property
    def size(self):
        return len(self.components)

    @property
    def product_size(self):
        return int(np.prod([fts.n_aug for fts in self.components]))

    def internal_index(self, i, x_indices):
        """Index of ``ŵ_i`` given every component's grid index."""
        sub = self.net.subsystems[i]
        if not sub.q:
            return 0
        parts = [apply_block(self.net.subsystems[j].outputs[i],
                             self.components[j].grid.coords([x_indices[j]]))[0]
                 for j, _ in sub.inputs]
        key = np.ascontiguousarray(np.concatenate(parts)).tobytes()
        return self._lookup[i][key]

    def decode(self, state):
        return [fts.decode(aug) for fts, aug in zip(self.components, state)]

    def component_successors(self, state):
        """Successor arrays per component of a product state (a sink stays a sink)."""
        if any(aug == fts.sink for fts, aug in zip(self.components, state)):
            return [np.array([fts.sink]) for fts in self.components]
        x_indices = [fts.decode(aug).x for fts, aug in zip(self.components, state)]
        return [fts.successors(int(aug), self.internal_index(i, x_indices))
                for i, (fts, aug) in enumerate(zip(self.components, state))]

    def successors(self, state):
        """Lazy iterator over product successors."""
        return itertools.product(*[s.tolist() for s in self.component_successors(state)])

    def states(self):
        """Iterator over all non-sink product states."""
        return itertools.product(*[range(fts.n_aug) for fts in self.components])


def interconnect_finite(ftss, net):
    """
    Couple finite abstractions into a network.

    Raises
    ------
    CouplingMismatch
        When a component's internal-input points differ from the image of
        its neighbours' output blocks over their grids.
    """
    grids = [fts.grid for fts in ftss]
    for i, fts in enumerate(ftss):
        if not net.subsystems[i].q:
            continue
        expected = set(_row_keys(coupled_internal_points(net, grids, i)))
        actual = set(_row_keys(fts.internal_points))
        if expected != actual:
            raise CouplingMismatch(
                i, f"{len(actual ^ expected)} internal-input point(s) differ from neighbour outputs")
    logger.debug("interconnected %d finite abstraction(s)", len(ftss))
    return NetworkFiniteTS(net, ftss)


def verify_composed_sampled(net, netfts, nasc, count, rng):
    """
    Falsify a network simulation function on random product tuples.

    Parameters
    ----------
    net : NetworkSpec
        Concrete network.
    netfts : NetworkFiniteTS
        Its coupled abstraction.
    nasc : NetworkAltSim
        Certificate under test.
    count : int
        Number of random tuples.
    rng : numpy.random.Generator
        Source of randomness.

    Returns
    -------
    FalsificationReport
        Violations; tuples leaving a state domain or an abstraction are
        counted as skipped.
    """
    report = FalsificationReport(checked=count)
    if count == 0:
        return report
    P, L, X, Xh, idx = [], [], [], [], []
    for sub, fts in zip(net.subsystems, netfts.components):
        P.append(rng.integers(sub.m, size=count))
        L.append(rng.integers(sub.dwell_time, size=count))
        idx.append(rng.integers(fts.n_x, size=count))
        Xh.append(fts.grid.coords(idx[-1]))
        x, lower, upper = sample_boxes(sub.state_domain, count, rng)
        near = rng.random(count) < 0.5
        jitter = rng.uniform(-3.0 * fts.eta, 3.0 * fts.eta, size=(count, sub.n))
        x[near] = np.clip(Xh[-1][near] + jitter[near], lower[near], upper[near])
        X.append(x)

    S = nasc.evaluate(P, L, X, Xh)
    external = [np.max(np.abs(sub.external_output @ (X[i] - Xh[i]).T), axis=0)
                for i, sub in enumerate(net.subsystems)]
    lower = nasc.alpha(np.maximum.reduce(external))
    for k in np.flatnonzero(exceeds_tolerance(lower, S)):
        report.add({'display': 'output', 'sample': int(k)})

    skipped = np.zeros(count, dtype=bool)
    worst = np.zeros(count)
    for i, (sub, fts, asc) in enumerate(zip(net.subsystems, netfts.components, nasc.components)):
        if sub.q:
            W = np.empty((count, sub.q))
            for source, block in sub.input_slices().items():
                W[:, block] = apply_block(net.subsystems[source].outputs[i], X[source])
            w_idx = np.array([netfts.internal_index(i, [ix[k] for ix in idx]) for k in range(count)])
            skipped |= ~in_domain(sub.internal_domain, W)
        else:
            W, w_idx = np.zeros((count, 0)), np.zeros(count, dtype=np.int64)
        status, local, _ = successor_margin(sub, fts, asc, X[i], P[i], L[i], idx[i], W, w_idx)
        skipped |= status == 2
        worst = np.maximum(worst, local / nasc.lambdas[i])

    bound = np.maximum(nasc.sigma * S, nasc.eps_tilde)
    report.skipped = int(skipped.sum())
    for k in np.flatnonzero(~skipped & exceeds_tolerance(worst, bound)):
        report.add({'display': 'transition', 'sample': int(k),
                    'lhs': float(worst[k]), 'rhs': float(bound[k])})
    logger.debug("network check: %d violation(s), %d skipped", report.violations, report.skipped)
    return report
