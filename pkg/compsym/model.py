"""
Switched-system domain model.

This module provides boxes, mode-indexed affine subsystems and the
input-output interconnection structure of a network of subsystems.
All norms are infinity norms.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from compsym.exceptions import DimensionMismatch, DomainViolation
from compsym.kfn import KFn, Linear

logger = logging.getLogger(__name__)

DOMAIN_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned box ``[lower, upper]``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise DimensionMismatch(f"box bounds of shapes {lower.shape} and {upper.shape}")
        if np.any(lower >= upper):
            raise ValueError(f"box needs lower < upper componentwise, got {lower} and {upper}")
        lower.setflags(write=False)
        upper.setflags(write=False)
        object.__setattr__(self, 'lower', lower)
        object.__setattr__(self, 'upper', upper)

    @property
    def dim(self):
        return self.lower.size

    @property
    def span(self):
        return float(np.min(self.upper - self.lower))

    def contains(self, x, tol=DOMAIN_TOL):
        """Membership of one point or of each row of a batch."""
        x = np.asarray(x, dtype=float)
        slack = tol * np.maximum(1.0, np.maximum(np.abs(self.lower), np.abs(self.upper)))
        inside = (x >= self.lower - slack) & (x <= self.upper + slack)
        return bool(np.all(inside)) if x.ndim == 1 else np.all(inside, axis=-1)

    def contains_box(self, other, tol=DOMAIN_TOL):
        return self.contains(other.lower, tol) and self.contains(other.upper, tol)

    def project(self, indices):
        return Box(self.lower[indices], self.upper[indices])

    def inflate(self, radius):
        return Box(self.lower - radius, self.upper + radius)

    def deflate(self, radius, lower=True, upper=True):
        """Shrink the selected sides by ``radius``; ``None`` when nothing is left."""
        lower = self.lower + radius if lower else self.lower
        upper = self.upper - radius if upper else self.upper
        if np.any(lower >= upper):
            return None
        return Box(lower, upper)

    def linear_image(self, C):
        """Exact interval image of ``x -> C x`` over the box."""
        C = np.atleast_2d(np.asarray(C, dtype=float))
        if C.shape[1] != self.dim:
            raise DimensionMismatch(f"matrix with {C.shape[1]} columns applied to {self.dim}-box")
        lo = np.where(C >= 0, C * self.lower, C * self.upper).sum(axis=1)
        hi = np.where(C >= 0, C * self.upper, C * self.lower).sum(axis=1)
        degenerate = hi <= lo
        hi = np.where(degenerate, lo, hi)
        return lo, hi

    def to_dict(self):
        return {'lower': self.lower.tolist(), 'upper': self.upper.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(data['lower'], data['upper'])

    def __repr__(self):
        return f"Box({self.lower.tolist()}, {self.upper.tolist()})"


def span_of(boxes):
    """Span of a finite union of boxes: the smallest side over all boxes."""
    return min(box.span for box in boxes)


def in_domain(boxes, x, tol=DOMAIN_TOL):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return any(box.contains(x, tol) for box in boxes)
    inside = np.zeros(x.shape[0], dtype=bool)
    for box in boxes:
        inside |= box.contains(x, tol)
    return inside


def sample_boxes(boxes, count, rng):
    """
    Uniform samples over a union of boxes.

    Each row comes from one box, picked with probability proportional to
    its volume.

    Returns
    -------
    (numpy.ndarray, numpy.ndarray, numpy.ndarray)
        The samples and the lower and upper bounds of each row's box.
    """
    lowers = np.vstack([box.lower for box in boxes])
    uppers = np.vstack([box.upper for box in boxes])
    if len(boxes) == 1:
        which = np.zeros(count, dtype=np.int64)
    else:
        volumes = np.prod(uppers - lowers, axis=1)
        which = rng.choice(len(boxes), size=count, p=volumes / volumes.sum())
    lower, upper = lowers[which], uppers[which]
    return rng.uniform(lower, upper), lower, upper


def affine_image(A, D, B, X, W):
    """
    Evaluate ``A x + D w + B`` row by row.

    Sums are accumulated in a fixed order with elementwise operations so
    a point gives bit-identical results alone or inside any batch.

    Parameters
    ----------
    A, D, B : numpy.ndarray
        Mode matrices, shapes ``(n, n)``, ``(n, q)`` and ``(n,)``.
    X : numpy.ndarray
        States, shape ``(k, n)``.
    W : numpy.ndarray
        Internal inputs, shape ``(k, q)``.

    Returns
    -------
    numpy.ndarray
        Successors, shape ``(k, n)``.
    """
    k, n = X.shape
    out = np.empty((k, n))
    for i in range(n):
        acc = A[i, 0] * X[:, 0]
        for j in range(1, n):
            acc = acc + A[i, j] * X[:, j]
        for j in range(D.shape[1]):
            acc = acc + D[i, j] * W[:, j]
        out[:, i] = acc + B[i]
    return out


@dataclass(frozen=True, eq=False)
class ModeDynamics:
    """Affine map ``x' = A x + D w + B`` of one mode."""

    A: np.ndarray
    B: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = A.shape[0]
        B = np.asarray(self.B, dtype=float).reshape(n)
        D = np.asarray(self.D, dtype=float)
        D = D.reshape(n, -1) if D.size else np.zeros((n, 0))
        if A.shape != (n, n):
            raise DimensionMismatch(f"A must be square, got {A.shape}")
        for arr in (A, B, D):
            arr.setflags(write=False)
        object.__setattr__(self, 'A', A)
        object.__setattr__(self, 'B', B)
        object.__setattr__(self, 'D', D)


@dataclass(frozen=True, eq=False)
class SwitchedSubsystem:
    """
    A discrete-time switched subsystem with affine modes.

    Parameters
    ----------
    id : int
        Index of the subsystem inside its network.
    modes : tuple of ModeDynamics
        One affine map per mode; modes are indexed from 0.
    state_domain : tuple of Box
        Finite union of boxes for the state.
    internal_domain : tuple of Box
        Finite union of boxes for the stacked internal input (empty when
        the subsystem has no internal input).
    inputs : tuple of (int, int)
        Internal-input partition as ``(source subsystem, block size)`` in
        the order the blocks appear inside ``w``.
    outputs : dict
        Output blocks ``C_ij`` keyed by target ``j``; the block keyed by the
        subsystem's own id is its external output.
    dwell_time : int
        Minimum number of steps between consecutive switches.
    output_lipschitz : KFn, optional
        Bound on the output map; defaults to the induced norm of the
        stacked output matrix.
    monotone : bool
        Whether the dynamics are monotone in the internal input, which lets
        synthesis check only extreme internal inputs.
    """

    id: int
    modes: Tuple[ModeDynamics, ...]
    state_domain: Tuple[Box, ...]
    internal_domain: Tuple[Box, ...] = ()
    inputs: Tuple[Tuple[int, int], ...] = ()
    outputs: Dict[int, np.ndarray] = field(default_factory=dict)
    dwell_time: int = 1
    output_lipschitz: Optional[KFn] = None
    monotone: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'modes', tuple(self.modes))
        object.__setattr__(self, 'state_domain', tuple(self.state_domain))
        object.__setattr__(self, 'internal_domain', tuple(self.internal_domain))
        object.__setattr__(self, 'inputs', tuple((int(j), int(size)) for j, size in self.inputs))
        if not self.modes:
            raise DimensionMismatch("a switched subsystem needs at least one mode")
        n, q = self.modes[0].A.shape[0], self.modes[0].D.shape[1]
        for p, mode in enumerate(self.modes):
            if mode.A.shape[0] != n or mode.D.shape[1] != q:
                raise DimensionMismatch(f"mode {p} of subsystem {self.id} has inconsistent shapes")
        if sum(size for _, size in self.inputs) != q:
            raise DimensionMismatch(
                f"internal-input blocks of subsystem {self.id} sum to "
                f"{sum(size for _, size in self.inputs)}, D has {q} columns")
        if any(box.dim != n for box in self.state_domain) or not self.state_domain:
            raise DimensionMismatch(f"state domain of subsystem {self.id} must be {n}-dimensional")
        if q and (not self.internal_domain or any(box.dim != q for box in self.internal_domain)):
            raise DimensionMismatch(f"internal domain of subsystem {self.id} must be {q}-dimensional")
        outputs = {}
        for target, C in (self.outputs or {self.id: np.eye(n)}).items():
            C = np.atleast_2d(np.asarray(C, dtype=float))
            if C.shape[1] != n:
                raise DimensionMismatch(f"output block C_{self.id}{target} has {C.shape[1]} columns, state has {n}")
            C.setflags(write=False)
            outputs[int(target)] = C
        if self.id not in outputs:
            outputs[self.id] = np.eye(n)
        object.__setattr__(self, 'outputs', outputs)
        if self.dwell_time < 1:
            raise ValueError(f"dwell time must be a positive integer, got {self.dwell_time}")
        if self.output_lipschitz is None:
            slope = float(np.max(np.abs(self.output_matrix).sum(axis=1)))
            object.__setattr__(self, 'output_lipschitz', Linear(slope))

    @property
    def n(self):
        return self.modes[0].A.shape[0]

    @property
    def q(self):
        return self.modes[0].D.shape[1]

    @property
    def m(self):
        return len(self.modes)

    @property
    def output_targets(self):
        """Output block order: own block first, then targets ascending."""
        return [self.id] + sorted(t for t in self.outputs if t != self.id)

    @property
    def output_matrix(self):
        return np.vstack([self.outputs[t] for t in self.output_targets])

    @property
    def external_output(self):
        return self.outputs[self.id]

    def input_slices(self):
        """Map each source subsystem to its slice of the internal input."""
        slices, start = {}, 0
        for source, size in self.inputs:
            slices[source] = slice(start, start + size)
            start += size
        return slices

    def image(self, p, X, W=None):
        """Batched successors ``f_p(X, W)`` without domain checks."""
        mode = self.modes[p]
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if W is None or self.q == 0:
            W = np.zeros((X.shape[0], self.q))
        W = np.asarray(W, dtype=float).reshape(X.shape[0], self.q)
        return affine_image(mode.A, mode.D, mode.B, X, W)

    def step(self, p, x, w=None):
        """
        Unique successor of ``x`` under mode ``p`` and internal input ``w``.

        Raises
        ------
        DomainViolation
            If the mode, state or internal input lies outside its domain.
        """
        if not (0 <= p < self.m):
            raise DomainViolation('mode', p, self.id)
        x = np.asarray(x, dtype=float).reshape(self.n)
        if not in_domain(self.state_domain, x):
            raise DomainViolation('state', x.tolist(), self.id)
        if self.q:
            if w is None:
                raise DomainViolation('internal input', None, self.id)
            w = np.asarray(w, dtype=float).reshape(self.q)
            if not in_domain(self.internal_domain, w):
                raise DomainViolation('internal input', w.tolist(), self.id)
        return self.image(p, x[None, :], None if not self.q else w[None, :])[0]

    def output(self, x):
        """Stacked output ``h(x)`` (own block first)."""
        return np.asarray(x, dtype=float) @ self.output_matrix.T

    def output_to(self, target, x):
        return np.asarray(x, dtype=float) @ self.outputs[target].T


def check_output_lipschitz(sub, count, rng):
    """
    Sampled check of ``|h(x) - h(x')| <= ell(|x - x'|)``.

    Returns
    -------
    list of tuple
        Violating ``(x, x')`` pairs.
    """
    X = sample_boxes(sub.state_domain, count, rng)[0]
    Y = sample_boxes(sub.state_domain, count, rng)[0]
    lhs = np.max(np.abs(sub.output(X) - sub.output(Y)), axis=1)
    rhs = sub.output_lipschitz(np.max(np.abs(X - Y), axis=1))
    bad = np.flatnonzero(lhs > rhs * (1 + 1e-12) + 1e-12)
    return [(X[k], Y[k]) for k in bad]


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    """Subsystems plus directed edges ``(j, i)`` meaning ``w_ij = y_ji``."""

    subsystems: Tuple[SwitchedSubsystem, ...]
    edges: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, 'subsystems', tuple(self.subsystems))
        object.__setattr__(self, 'edges', frozenset((int(j), int(i)) for j, i in self.edges))
        for index, sub in enumerate(self.subsystems):
            if sub.id != index:
                raise DimensionMismatch(f"subsystem at position {index} has id {sub.id}")
        for j, i in self.edges:
            if not (0 <= j < self.size and 0 <= i < self.size) or i == j:
                raise DimensionMismatch(f"edge ({j} -> {i}) is not between distinct subsystems")

    @property
    def size(self):
        return len(self.subsystems)

    def sources(self, i):
        return sorted(j for j, target in self.edges if target == i)

    def internal_input(self, i, states):
        """Stack ``w_i`` from neighbour states as prescribed by the partition."""
        sub = self.subsystems[i]
        parts = [self.subsystems[j].output_to(i, states[j]) for j, _ in sub.inputs]
        return np.concatenate(parts) if parts else np.zeros(0)


@dataclass
class EdgeVerdict:
    source: int
    target: int
    image: Tuple[List[float], List[float]]
    contained: bool
    detail: str = ''

    def to_dict(self):
        return {
            'edge': [self.source, self.target],
            'image': {'lower': self.image[0], 'upper': self.image[1]},
            'contained': self.contained,
            'detail': self.detail,
        }


@dataclass
class NetworkReport:
    edges: List[EdgeVerdict]

    @property
    def passed(self):
        return all(verdict.contained for verdict in self.edges)

    def to_dict(self):
        return {'passed': self.passed, 'edges': [verdict.to_dict() for verdict in self.edges]}


def validate_network(net):
    """
    Check ``Y_ji ⊆ W_ij`` for every edge, exactly for affine outputs on boxes.

    Parameters
    ----------
    net : NetworkSpec
        The network to validate.

    Returns
    -------
    NetworkReport
        Per-edge containment verdicts.

    Raises
    ------
    DimensionMismatch
        When an edge has no matching output or input block, or sizes disagree.
    """
    verdicts = []
    for j, i in sorted(net.edges):
        source, target = net.subsystems[j], net.subsystems[i]
        if i not in source.outputs:
            raise DimensionMismatch(f"edge ({j} -> {i}) has no output block C_{j}{i}")
        slices = target.input_slices()
        if j not in slices:
            raise DimensionMismatch(f"edge ({j} -> {i}) has no internal-input block w_{i}{j}")
        C = source.outputs[i]
        block = slices[j]
        if C.shape[0] != block.stop - block.start:
            raise DimensionMismatch(
                f"C_{j}{i} has {C.shape[0]} rows, block w_{i}{j} has {block.stop - block.start}")
        contained = True
        lo_all, hi_all = None, None
        for box in source.state_domain:
            lo, hi = box.linear_image(C)
            lo_all = lo if lo_all is None else np.minimum(lo_all, lo)
            hi_all = hi if hi_all is None else np.maximum(hi_all, hi)
            fits = any(
                _interval_inside(lo, hi, w_box.lower[block], w_box.upper[block])
                for w_box in target.internal_domain)
            contained = contained and fits
        verdicts.append(EdgeVerdict(j, i, (lo_all.tolist(), hi_all.tolist()), contained))
    for sub in net.subsystems:
        for target, C in sub.outputs.items():
            if target != sub.id and (sub.id, target) not in net.edges and np.any(C != 0):
                lo, hi = sub.state_domain[0].linear_image(C)
                verdicts.append(EdgeVerdict(
                    sub.id, target, (lo.tolist(), hi.tolist()), False,
                    'nonzero output block without an edge'))
    for sub in net.subsystems:
        for source, _ in sub.inputs:
            if (source, sub.id) not in net.edges:
                raise DimensionMismatch(f"block w_{sub.id}{source} has no edge ({source} -> {sub.id})")
    report = NetworkReport(verdicts)
    logger.debug("network validation: %d edge(s), passed=%s", len(verdicts), report.passed)
    return report


def _interval_inside(lo, hi, lower, upper, tol=DOMAIN_TOL):
    slack = tol * np.maximum(1.0, np.maximum(np.abs(lower), np.abs(upper)))
    return bool(np.all(lo >= lower - slack) and np.all(hi <= upper + slack))


def interconnected_matrix(net, modes):
    """
    Monolithic affine map of the interconnected system under a mode vector.

    Returns
    -------
    (numpy.ndarray, numpy.ndarray)
        ``(A, b)`` with ``x' = A x + b`` on the stacked state.
    """
    offsets = np.cumsum([0] + [sub.n for sub in net.subsystems])
    total = offsets[-1]
    A = np.zeros((total, total))
    b = np.zeros(total)
    for i, sub in enumerate(net.subsystems):
        mode = sub.modes[modes[i]]
        rows = slice(offsets[i], offsets[i + 1])
        A[rows, rows] += mode.A
        b[rows] = mode.B
        for j, block in sub.input_slices().items():
            source = net.subsystems[j]
            A[rows, offsets[j]:offsets[j + 1]] += mode.D[:, block] @ source.outputs[i]
    return A, b
