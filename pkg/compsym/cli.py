"""
Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 build error, 4 failed gate
(sampled verification, small-gain condition, empty winning set or unsafe
closed loop).
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from compsym import __version__
from compsym.abstraction import build_grid
from compsym.certification import (
    build_alt_sim,
    certify_delta_iss_affine,
    relation_radius,
    require_passed,
)
from compsym.composition import (
    GainMatrix,
    check_small_gain,
    composed_alt_sim,
    compute_deltas,
    coupled_internal_points,
    gain_matrix,
    interconnect_finite,
)
from compsym.exceptions import BUILD, CONFIG, GATE, ConfigError, DimensionMismatch, ToolkitError
from compsym.model import Box, ModeDynamics, NetworkSpec, SwitchedSubsystem, validate_network
from compsym.session import Session
from compsym.synthesis import (
    ClosedLoopResult,
    RefinedController,
    SafetySpec,
    refinement_target,
    simulate_closed_loop,
)
from compsym.traffic import TrafficParams
from compsym.utils.io import (
    dump_controller,
    dump_finite_ts,
    finite_ts_to_dot,
    gain_digraph_to_dot,
    to_json,
    write_json_report,
    write_text,
    write_trajectory_csv,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CODES = {CONFIG: 2, BUILD: 3, GATE: 4}
COMMANDS = ('abstract', 'certify', 'compose', 'synthesize', 'simulate', 'traffic')


@dataclass
class RunConfig:
    """Validated command-line configuration."""

    command: str
    spec: Optional[str] = None
    eta: Optional[float] = None
    varpi: float = 0.0
    epsilon: float = 2.0
    kd: Optional[int] = None
    theta: Tuple[float, float, float] = (0.66, 0.34, 0.0)
    samples: int = 10000
    seed: int = 0
    out: str = 'out'
    workers: int = 1
    materialize: bool = False
    dot: bool = False
    scale_links: Optional[int] = None
    symmetry: bool = False
    steps: int = 600
    log_level: str = 'WARNING'

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command '{self.command}'")
        if self.command != 'traffic':
            if not self.spec:
                raise ConfigError("--spec is required")
            if not os.path.isfile(self.spec):
                raise ConfigError(f"network document '{self.spec}' does not exist")
            if self.eta is None:
                raise ConfigError("--eta is required")
        if self.eta is not None and not self.eta > 0:
            raise ConfigError(f"--eta must be positive, got {self.eta}")
        if self.varpi < 0:
            raise ConfigError(f"--varpi must be nonnegative, got {self.varpi}")
        if not self.epsilon > 1:
            raise ConfigError(f"--epsilon must exceed 1, got {self.epsilon}")
        if self.kd is not None and self.kd < 1:
            raise ConfigError(f"--kd must be at least 1, got {self.kd}")
        t1, t2, t3 = self.theta
        if not (t1 > 0 and t2 > 0 and t3 >= 0) or abs(t1 + t2 + t3 - 1.0) > 1e-9:
            raise ConfigError(f"--theta must be positive, nonnegative third, summing to 1: {self.theta}")
        if self.samples < 0 or self.steps < 0:
            raise ConfigError("--samples and --steps must be nonnegative")
        if self.workers < 1:
            raise ConfigError(f"--workers must be at least 1, got {self.workers}")
        if self.scale_links is not None and self.scale_links < 2:
            raise ConfigError(f"--scale-links must be at least 2, got {self.scale_links}")
        return self


@dataclass
class NetworkDocument:
    """A parsed network document."""

    net: NetworkSpec
    weights: Dict[int, List[np.ndarray]]
    safe: Dict[int, Box]
    gains: Optional[np.ndarray] = None
    seed: Optional[int] = None
    x0: Optional[List[np.ndarray]] = None


def _boxes(data, what):
    if isinstance(data, dict):
        data = [data]
    try:
        return tuple(Box.from_dict(box) for box in data)
    except (KeyError, TypeError, ValueError, DimensionMismatch) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


def parse_network_document(document):
    """
    Build a :class:`NetworkDocument` from a decoded JSON document.

    A document holding only ``gains`` describes a gain matrix without
    subsystems.
    """
    if not isinstance(document, dict):
        raise ConfigError("network document must be a JSON object")
    gains = document.get('gains')
    gains = np.asarray(gains, dtype=float) if gains is not None else None
    subsystems, weights, safe = [], {}, {}
    for index, entry in enumerate(document.get('subsystems', [])):
        try:
            modes = tuple(ModeDynamics(m['A'], m.get('B', 0.0 * np.asarray(m['A'])[:, 0]), m.get('D', []))
                          for m in entry['modes'])
            outputs = {int(k): np.asarray(v, dtype=float) for k, v in entry.get('outputs', {}).items()}
            sub = SwitchedSubsystem(
                id=int(entry.get('id', index)),
                modes=modes,
                state_domain=_boxes(entry['state_domain'], 'state domain'),
                internal_domain=_boxes(entry.get('internal_domain', []), 'internal domain'),
                inputs=tuple((int(i['source']), int(i['size'])) for i in entry.get('inputs', [])),
                outputs=outputs,
                dwell_time=int(entry.get('dwell_time', 1)),
                monotone=bool(entry.get('monotone', False)),
            )
        except KeyError as exc:
            raise ConfigError(f"subsystem {index} lacks field {exc}") from exc
        except (ValueError, DimensionMismatch) as exc:
            raise ConfigError(f"subsystem {index}: {exc}") from exc
        subsystems.append(sub)
        if 'weights' in entry:
            weights[sub.id] = [np.asarray(w, dtype=float) for w in entry['weights']]
        if 'safe' in entry:
            safe[sub.id] = _boxes(entry['safe'], 'safe box')[0]
    if not subsystems and gains is None:
        raise ConfigError("network document has neither subsystems nor gains")
    edges = frozenset(tuple(e) for e in document.get('edges', [])) if subsystems else frozenset()
    try:
        net = NetworkSpec(tuple(subsystems), edges)
    except DimensionMismatch as exc:
        raise ConfigError(str(exc)) from exc
    x0 = document.get('x0')
    x0 = [np.asarray(x, dtype=float) for x in x0] if x0 is not None else None
    return NetworkDocument(net, weights, safe, gains, document.get('seed'), x0)


def load_network_document(path):
    try:
        with open(path, encoding='utf-8') as handle:
            document = json.load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read '{path}': {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"'{path}' is not valid JSON: {exc}") from exc
    return parse_network_document(document)


def _with_dwell(net, kd):
    if kd is None:
        return net
    subs = tuple(dataclasses.replace(sub, dwell_time=kd) for sub in net.subsystems)
    return NetworkSpec(subs, net.edges)


def _internal_for(config, net, grids, i):
    sub = net.subsystems[i]
    if not sub.q:
        return None
    if config.varpi > 0:
        return config.varpi
    return coupled_internal_points(net, grids, i)


def _abstractions(config, session, net, report):
    grids = [build_grid(sub.state_domain, config.eta) for sub in net.subsystems]
    ftss, timings = [], []
    for i, sub in enumerate(net.subsystems):
        start = time.perf_counter()
        ftss.append(session.build_abstraction(sub, config.eta, _internal_for(config, net, grids, i),
                                              materialize=config.materialize))
        timings.append(time.perf_counter() - start)
    report['abstraction'] = {
        'states': [fts.n_x for fts in ftss],
        'augmented_states': [fts.n_aug for fts in ftss],
        'inputs': [fts.n_w for fts in ftss],
        'build_seconds': timings,
    }
    return ftss


def _certificates(config, session, doc, net, ftss, report):
    certs, ascs, checks = [], [], []
    for sub, fts in zip(net.subsystems, ftss):
        cert = certify_delta_iss_affine(sub, doc.weights.get(sub.id))
        require_passed(session.check_certificate(sub, cert, config.samples),
                       f'certificate of subsystem {sub.id}')
        varpi = (config.varpi or config.eta) if sub.q else 0.0
        asc = build_alt_sim(cert, config.eta, varpi, config.epsilon, sub.dwell_time, config.theta,
                            sub.output_lipschitz)
        asc = asc.with_radius(relation_radius(asc))
        check = session.verify_alt_sim(sub, fts, asc, config.samples)
        checks.append(check.to_dict())
        require_passed(check, f'alternating simulation function of subsystem {sub.id}')
        certs.append(cert)
        ascs.append(asc)
    report['certificates'] = [dict(asc.to_dict(), check=check) for asc, check in zip(ascs, checks)]
    return certs, ascs


def cmd_abstract(config, session, report):
    doc = load_network_document(config.spec)
    net = _with_dwell(doc.net, config.kd)
    ftss = _abstractions(config, session, net, report)
    dumps = []
    for fts in ftss:
        path = os.path.join(config.out, f'abstraction_{fts.sub.id}.npz')
        os.makedirs(config.out, exist_ok=True)
        dumps.append(dump_finite_ts(path, fts))
        if config.dot:
            write_text(os.path.join(config.out, f'abstraction_{fts.sub.id}.dot'), finite_ts_to_dot(fts))
    report['dumps'] = dumps
    return EXIT_OK


def cmd_certify(config, session, report):
    doc = load_network_document(config.spec)
    net = _with_dwell(doc.net, config.kd)
    ftss = _abstractions(config, session, net, report)
    _certificates(config, session, doc, net, ftss, report)
    return EXIT_OK


def _small_gain(config, gm, report):
    if config.dot:
        write_text(os.path.join(config.out, 'gains.dot'), gain_digraph_to_dot(gm))
    small_gain = check_small_gain(gm)
    report['small_gain'] = small_gain.to_dict()
    small_gain.require()
    deltas = compute_deltas(gm)
    small_gain.deltas, small_gain.theta = deltas.lambdas.tolist(), deltas.theta
    report['small_gain'] = small_gain.to_dict()
    return deltas


def cmd_compose(config, session, report):
    doc = load_network_document(config.spec)
    if doc.gains is not None and not doc.net.size:
        _small_gain(config, GainMatrix.from_slopes(doc.gains), report)
        return EXIT_OK
    net = _with_dwell(doc.net, config.kd)
    report['network'] = validate_network(net).to_dict()
    ftss = _abstractions(config, session, net, report)
    _, ascs = _certificates(config, session, doc, net, ftss, report)
    deltas = _small_gain(config, gain_matrix(ascs, net.edges), report)
    nasc = composed_alt_sim(ascs, deltas)
    check = session.verify_network(net, interconnect_finite(ftss, net), nasc, config.samples)
    report['composed'] = dict(nasc.to_dict(), check=check.to_dict())
    require_passed(check, 'network alternating simulation function')
    return EXIT_OK


def _assumption(net, safe, i):
    """
    Internal inputs of subsystem ``i`` produced by neighbours kept safe.

    A neighbour's safe box bounds its state only when its external output
    is the identity; other blocks keep the internal domain.
    """
    sub = net.subsystems[i]
    if not sub.q:
        return None
    domain = sub.internal_domain[0]
    lower, upper = domain.lower.copy(), domain.upper.copy()
    slices = sub.input_slices()
    narrowed = False
    for source, _ in sub.inputs:
        neighbour = net.subsystems[source]
        C = neighbour.external_output
        if safe.get(source) is None or C.shape != (neighbour.n, neighbour.n) or np.any(C != np.eye(neighbour.n)):
            continue
        lo, hi = safe[source].linear_image(neighbour.outputs[i])
        block = slices[source]
        lower[block] = np.maximum(lower[block], lo)
        upper[block] = np.minimum(upper[block], hi)
        narrowed = True
    if not narrowed:
        return None
    upper = np.maximum(upper, lower + 1e-12)
    return Box(lower, upper)


def _safe_boxes(doc, net):
    missing = [sub.id for sub in net.subsystems if sub.id not in doc.safe]
    if missing:
        raise ConfigError(f"subsystem(s) {missing} have no safe box")
    return {sub.id: doc.safe[sub.id] for sub in net.subsystems}


def _synthesize(config, session, net, ftss, safe, report):
    ctrls, timings = [], []
    for i, fts in enumerate(ftss):
        start = time.perf_counter()
        ctrls.append(session.synthesize(fts, SafetySpec(safe[i], config.steps), _assumption(net, safe, i)))
        timings.append(time.perf_counter() - start)
    report['synthesis'] = {
        'winning': [c.size for c in ctrls],
        'empty': [c.empty for c in ctrls],
        'seconds': timings,
    }
    return ctrls


def cmd_synthesize(config, session, report):
    doc = load_network_document(config.spec)
    net = _with_dwell(doc.net, config.kd)
    safe = _safe_boxes(doc, net)
    ftss = _abstractions(config, session, net, report)
    ctrls = _synthesize(config, session, net, ftss, safe, report)
    os.makedirs(config.out, exist_ok=True)
    report['dumps'] = [dump_controller(os.path.join(config.out, f'controller_{i}.npz'), ctrl)
                       for i, ctrl in enumerate(ctrls)]
    return EXIT_OK if not any(c.empty for c in ctrls) else EXIT_CODES[GATE]


def _initial_states(session, net, targets):
    x0 = []
    for sub in net.subsystems:
        box = sub.state_domain[0]
        target = targets.get(sub.id)
        if target is not None and target.dim == sub.n and np.all(sub.external_output == np.eye(sub.n)):
            lower, upper = np.maximum(box.lower, target.lower), np.minimum(box.upper, target.upper)
            if np.all(lower <= upper):
                box = Box(lower, np.maximum(upper, lower + 1e-12))
        x0.append(session.rng.uniform(box.lower, box.upper))
    return x0


def cmd_simulate(config, session, report):
    doc = load_network_document(config.spec)
    net = _with_dwell(doc.net, config.kd)
    csv_path = os.path.join(config.out, 'trajectory.csv')
    state_dim = max(sub.n for sub in net.subsystems)
    if config.steps == 0:
        write_trajectory_csv(csv_path, ClosedLoopResult([], True, 0), state_dim)
        report['closed_loop'] = {'steps': 0, 'passed': True, 'rows': 0}
        report['trajectory'] = csv_path
        return EXIT_OK
    safe = _safe_boxes(doc, net)
    ftss = _abstractions(config, session, net, report)
    _, ascs = _certificates(config, session, doc, net, ftss, report)
    targets = {sub.id: refinement_target(safe[sub.id], asc.eps_hat) for sub, asc in zip(net.subsystems, ascs)}
    report['targets'] = [None if targets[i] is None else targets[i].to_dict() for i in range(net.size)]
    ctrls = _synthesize(config, session, net, ftss, targets, report)
    if any(c.empty for c in ctrls):
        return EXIT_CODES[GATE]
    controllers = [RefinedController(ctrl, fts, asc.eps_hat, asc, target=targets[i])
                   for i, (ctrl, fts, asc) in enumerate(zip(ctrls, ftss, ascs))]
    report['refine'] = {
        'eps_hat': [c.eps_hat for c in controllers],
        'guarantee': [c.guarantee.to_dict() for c in controllers],
    }
    x0 = doc.x0 if doc.x0 is not None else _initial_states(session, net, targets)
    result = simulate_closed_loop(net, controllers, x0, config.steps, [safe[i] for i in range(net.size)])
    write_trajectory_csv(csv_path, result, state_dim)
    report['closed_loop'] = result.to_dict()
    report['trajectory'] = csv_path
    return EXIT_OK if result.passed else EXIT_CODES[GATE]


def cmd_traffic(config, session, report):
    params = TrafficParams(splitters=tuple(config.theta), epsilon=config.epsilon)
    if config.scale_links is not None:
        params.links = config.scale_links
    if config.eta is not None:
        params.eta = config.eta
    result = session.run_traffic(
        params, steps=config.steps, samples=config.samples,
        network_samples=min(config.samples, 1000), materialize=config.materialize,
        symmetry=config.symmetry)
    report.update(result.report)
    if result.trajectory is not None:
        report['trajectory'] = write_trajectory_csv(
            os.path.join(config.out, 'trajectory.csv'), result.trajectory, 2)
    return EXIT_OK if result.passed else EXIT_CODES[GATE]


HANDLERS = {
    'abstract': cmd_abstract,
    'certify': cmd_certify,
    'compose': cmd_compose,
    'synthesize': cmd_synthesize,
    'simulate': cmd_simulate,
    'traffic': cmd_traffic,
}


def _theta(text):
    try:
        values = tuple(float(v) for v in text.split(','))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid splitters '{text}'") from exc
    if len(values) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated splitters")
    return values


def _parse_args(argv=None):
    parser = argparse.ArgumentParser(
        prog='compsym',
        description='Compositional symbolic control of switched systems.')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('command', choices=COMMANDS)
    parser.add_argument('--spec', help='network document (JSON)')
    parser.add_argument('--eta', type=float, help='state quantization parameter')
    parser.add_argument('--varpi', type=float, default=0.0,
                        help='internal-input quantization; 0 uses neighbour output points')
    parser.add_argument('--epsilon', type=float, default=2.0, help='dwell exponent (> 1)')
    parser.add_argument('--kd', type=int, help='override the dwell time of every subsystem')
    parser.add_argument('--theta', type=_theta, default=(0.66, 0.34, 0.0),
                        help='splitting weights theta1,theta2,theta3')
    parser.add_argument('--samples', type=int, default=10000)
    parser.add_argument('--seed', type=int)
    parser.add_argument('--out', default='out')
    parser.add_argument('--workers', type=int, default=1)
    parser.add_argument('--materialize', action='store_true')
    parser.add_argument('--dot', action='store_true')
    parser.add_argument('--scale-links', dest='scale_links', type=int)
    parser.add_argument('--symmetry', action='store_true')
    parser.add_argument('--steps', type=int, default=600)
    parser.add_argument('--log-level', dest='log_level', default='WARNING',
                        choices=('DEBUG', 'INFO', 'WARNING', 'ERROR'))
    return parser.parse_args(argv)


def build_config(args):
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    values = {k: v for k, v in vars(args).items() if k in fields and v is not None}
    return RunConfig(**values)


def main(argv=None):
    """Run one command; returns the process exit code."""
    try:
        args = _parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CODES[CONFIG]
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format='%(asctime)s %(name)s %(levelname)s %(message)s')
    report = {'command': args.command}
    try:
        config = build_config(args).validate()
        if args.seed is None and config.spec and os.path.isfile(config.spec):
            seed = load_network_document(config.spec).seed
            config.seed = int(seed) if seed is not None else config.seed
        session = Session(seed=config.seed, workers=config.workers)
        report['seed'] = config.seed
        code = HANDLERS[config.command](config, session, report)
        report['seed'] = config.seed
    except ToolkitError as exc:
        logger.error("%s failed: %s", args.command, exc)
        report['error'] = exc.response
        code = EXIT_CODES.get(exc.category, EXIT_CODES[BUILD])
    report['exit_code'] = code
    write_json_report(os.path.join(args.out, 'report.json'), report)
    print(to_json(report))
    return code


if __name__ == '__main__':
    sys.exit(main())
