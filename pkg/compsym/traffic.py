"""
Road-traffic ring network.

A circular road is split into links of two cells each. Cell densities move
downstream with ratio ``tau * v / d`` per step; a fraction leaves through an
exit in each cell, and a traffic light at the entry of the first cell of
each link admits ``entry_flow`` vehicles when green. Mode 0 is red and
mode 1 is green.
"""

import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from compsym.abstraction import FiniteTS, build_finite_ts, build_grid
from compsym.certification import (
    build_alt_sim,
    certify_delta_iss_affine,
    check_cert_sampled,
    relation_radius,
    require_passed,
    verify_alt_sim_sampled,
)
from compsym.composition import (
    check_small_gain,
    composed_alt_sim,
    compute_deltas,
    coupled_internal_points,
    gain_matrix,
    interconnect_finite,
    verify_composed_sampled,
)
from compsym.exceptions import ConfigError, PipelineError, ToolkitError
from compsym.model import Box, ModeDynamics, NetworkSpec, SwitchedSubsystem, validate_network
from compsym.synthesis import (
    RefinedController,
    SafetySpec,
    refinement_target,
    simulate_closed_loop,
    solve_safety,
)

logger = logging.getLogger(__name__)

RED = 0
GREEN = 1


@dataclass
class TrafficParams:
    """Parameters of the ring road; time in hours, lengths in km."""

    links: int = 25
    tau: float = 10.0 / 3600.0
    speed: float = 120.0
    cell_length: float = 1.0
    entry_flow: float = 12.0
    keep_odd: float = 0.9
    keep_even: float = 0.65
    eta: float = 0.03
    safe_density: float = 30.0
    domain_upper: Optional[float] = None
    splitters: Tuple[float, float, float] = (0.66, 0.34, 0.0)
    epsilon: float = 2.0

    @property
    def ratio(self):
        return self.tau * self.speed / self.cell_length

    @property
    def upper(self):
        return self.safe_density if self.domain_upper is None else self.domain_upper

    def validate(self):
        for name in ('tau', 'speed', 'cell_length', 'entry_flow', 'keep_odd', 'keep_even',
                     'eta', 'safe_density'):
            if not getattr(self, name) > 0:
                raise ConfigError(f"traffic parameter '{name}' must be positive")
        if self.links < 2:
            raise ConfigError(f"a ring needs at least two links, got {self.links}")
        if not self.ratio < min(self.keep_odd, self.keep_even):
            raise ConfigError(
                f"flow ratio {self.ratio:.6g} must stay below the keep fractions "
                f"{self.keep_odd} and {self.keep_even}")
        if self.upper < self.safe_density:
            raise ConfigError("the state domain must contain the safe densities")
        return self


def link_modes(params):
    """Red and green dynamics of one link."""
    r = params.ratio
    A = np.array([[params.keep_odd - r, 0.0], [r, params.keep_even - r]])
    D = np.array([[r], [0.0]])
    return (ModeDynamics(A, np.zeros(2), D),
            ModeDynamics(A, np.array([params.entry_flow, 0.0]), D))


def build_traffic_network(params):
    """
    Build the ring of links.

    Link ``i`` receives the density of the last cell of link ``i - 1``
    (wrapping around) as its internal input.

    Returns
    -------
    NetworkSpec
        ``params.links`` two-cell subsystems.
    """
    params.validate()
    n = params.links
    modes = link_modes(params)
    domain = Box([0.0, 0.0], [params.upper, params.upper])
    internal = Box([0.0], [params.upper])
    subsystems = []
    for i in range(n):
        subsystems.append(SwitchedSubsystem(
            id=i,
            modes=modes,
            state_domain=(domain,),
            internal_domain=(internal,),
            inputs=(((i - 1) % n, 1),),
            outputs={i: np.eye(2), (i + 1) % n: np.array([[0.0, 1.0]])},
            dwell_time=1,
            monotone=True,
        ))
    edges = frozenset((i, (i + 1) % n) for i in range(n))
    return NetworkSpec(tuple(subsystems), edges)


def safe_box(params):
    """Safe densities ``[0, safe_density]`` for both cells of a link."""
    return Box([0.0, 0.0], [params.safe_density, params.safe_density])


def synthesis_target(params, eps_hat):
    """
    Safe box shrunk by the relation radius ``eps_hat``.

    Densities stay nonnegative under both modes, so only the upper bound
    gets the margin.
    """
    return refinement_target(safe_box(params), eps_hat, lower=False)


@dataclass
class PipelineResult:
    report: Dict
    trajectory: Optional[object] = None
    controllers: List = field(default_factory=list)
    abstractions: List = field(default_factory=list)

    @property
    def passed(self):
        return bool(self.report.get('passed'))


class _Stages:
    def __init__(self):
        self.timings = {}

    @contextmanager
    def stage(self, name):
        logger.info('++ %s', name)
        start = time.perf_counter()
        try:
            yield
        except ToolkitError as exc:
            if isinstance(exc, PipelineError):
                raise
            raise PipelineError(name, exc) from exc
        finally:
            self.timings[name] = time.perf_counter() - start
        logger.info('-- %s %.3fs', name, self.timings[name])


def run_traffic_pipeline(params, rng, steps=600, samples=10000, network_samples=1000,
                         materialize=False, symmetry=False, workers=1, x0=None):
    """
    Run the compositional pipeline on the ring road.

    Stages: certify, abstract, the alternating-simulation gate, small
    gain, compose, synthesize, refine and closed-loop simulation. A failing
    stage raises :class:`PipelineError` naming it.

    Parameters
    ----------
    params : TrafficParams
        Ring parameters, including the quantization ``eta``.
    rng : numpy.random.Generator
        Source of all randomness.
    steps : int
        Closed-loop horizon.
    samples, network_samples : int
        Sample counts of the local and network gates.
    materialize : bool
        Materialize the successor tables.
    symmetry : bool
        Synthesize one link and reuse its controller for every link.
    workers : int
        Threads for table building and synthesis.
    x0 : sequence of array_like, optional
        Initial densities; drawn uniformly from the safe box by default.

    Returns
    -------
    PipelineResult
        The report plus the closed-loop trajectory.
    """
    stages = _Stages()
    report = {'params': asdict(params)}
    report['params']['splitters'] = list(params.splitters)

    with stages.stage('build'):
        net = build_traffic_network(params)
        validation = validate_network(net)
        report['network'] = validation.to_dict()
        if not validation.passed:
            raise ConfigError("ring coupling leaves an internal-input domain")

    with stages.stage('certify'):
        certs = [certify_delta_iss_affine(sub) for sub in net.subsystems]
        checked = net.subsystems[:1] if symmetry else net.subsystems
        checks = [require_passed(check_cert_sampled(sub, certs[sub.id], samples, rng),
                                 f'incremental stability certificate of link {sub.id}')
                  for sub in checked]
        report['certificate'] = {
            'kappa': [list(c.kappa) for c in certs],
            'rho': [[r.linear_slope() for r in c.rho] for c in certs],
            'checks': [check.to_dict() for check in checks],
        }

    with stages.stage('abstract'):
        grids = [build_grid(sub.state_domain, params.eta) for sub in net.subsystems]
        ftss = []
        for i, sub in enumerate(net.subsystems):
            if symmetry and ftss:
                ftss.append(FiniteTS(sub, ftss[0].grid, ftss[0].internal_points, 0.0, ftss[0].table))
                continue
            points = coupled_internal_points(net, grids, i)
            ftss.append(build_finite_ts(sub, params.eta, points, materialize=materialize, workers=workers))
        report['abstraction'] = {'states': [fts.n_x for fts in ftss], 'inputs': [fts.n_w for fts in ftss]}

    with stages.stage('alt_sim'):
        ascs = []
        for sub, cert, fts in zip(net.subsystems, certs, ftss):
            asc = build_alt_sim(cert, params.eta, params.eta, params.epsilon, sub.dwell_time,
                                params.splitters, sub.output_lipschitz)
            ascs.append(asc.with_radius(relation_radius(asc)))
        gates = [require_passed(verify_alt_sim_sampled(sub, ftss[sub.id], ascs[sub.id], samples, rng),
                                f'alternating simulation function of link {sub.id}')
                 for sub in checked]
        report['alt_sim'] = {
            'sigma': [a.sigma for a in ascs],
            'rho_hat': [a.rho_hat.linear_slope() for a in ascs],
            'eps_tilde': [a.eps_tilde for a in ascs],
            'eps_hat': [a.eps_hat for a in ascs],
            'checks': [gate.to_dict() for gate in gates],
        }

    with stages.stage('small_gain'):
        gm = gain_matrix(ascs, net.edges)
        small_gain = check_small_gain(gm).require()
        deltas = compute_deltas(gm)
        small_gain.deltas, small_gain.theta = deltas.lambdas.tolist(), deltas.theta
        slopes = gm.slopes()
        report['small_gain'] = small_gain.to_dict()
        report['small_gain']['all_below_identity'] = bool(np.all(slopes < 1.0))

    with stages.stage('compose'):
        nasc = composed_alt_sim(ascs, deltas)
        netfts = interconnect_finite(ftss, net)
        gate = require_passed(verify_composed_sampled(net, netfts, nasc, network_samples, rng),
                              'network alternating simulation function')
        report['composed'] = nasc.to_dict()
        report['composed']['check'] = gate.to_dict()

    with stages.stage('synthesize'):
        targets = [synthesis_target(params, asc.eps_hat) for asc in ascs]
        ctrls = []
        for i, fts in enumerate(ftss):
            if symmetry and ctrls:
                ctrls.append(ctrls[0])
                continue
            source = targets[(i - 1) % params.links]
            if targets[i] is None or source is None:
                ctrls.append(solve_safety(fts, SafetySpec(None, steps)))
                continue
            # the neighbour's last cell is kept inside its own target
            assumption = Box([0.0], [source.upper[1]])
            ctrls.append(solve_safety(fts, SafetySpec(targets[i], steps), assumption,
                                      monotone=True, workers=workers))
        report['synthesis'] = {
            'winning': [c.size for c in ctrls],
            'empty': any(c.empty for c in ctrls),
            'targets': [None if t is None else t.to_dict() for t in targets],
        }

    if report['synthesis']['empty']:
        report['passed'] = False
        report['timings'] = stages.timings
        return PipelineResult(report, None, [], ftss)

    with stages.stage('refine'):
        controllers = [RefinedController(ctrl, fts, asc.eps_hat, asc, preference='highest', target=target)
                       for ctrl, fts, asc, target in zip(ctrls, ftss, ascs, targets)]
        report['refine'] = {
            'eps_hat': [c.eps_hat for c in controllers],
            'guarantee': [c.guarantee.to_dict() for c in controllers],
        }

    with stages.stage('simulate'):
        if x0 is None:
            x0 = [rng.uniform(t.lower, t.upper) for t in targets]
        result = simulate_closed_loop(net, controllers, x0, steps, [safe_box(params)] * params.links)
        densities = np.array([row[2] for row in result.rows]) if result.rows else np.zeros((0, 2))
        peak = float(densities.max()) if densities.size else 0.0
        below = peak < params.safe_density
        report['closed_loop'] = dict(result.to_dict(), max_density=peak, below_safe_density=below)

    report['timings'] = stages.timings
    report['passed'] = bool(result.passed and below)
    return PipelineResult(report, result, controllers, ftss)
