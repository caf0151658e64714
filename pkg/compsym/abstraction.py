"""
Finite abstractions of switched subsystems.

This module provides grid quantization of boxes, the dwell-time transition
system of a switched subsystem over augmented states ``(x, p, l)`` and its
finite abstraction, where the successors of ``(x̂, p, l)`` are all grid
points within infinity-distance ``eta`` of ``f_p(x̂, ŵ)`` combined with the
dwell scenarios.
"""

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import sparse

from compsym.exceptions import ConfigError, DimensionMismatch, DwellViolation, EtaTooLarge
from compsym.model import span_of

logger = logging.getLogger(__name__)

TIE_TOL = 1e-12
INDEX_TOL = 1e-9


def within_eta(distance, eta):
    """Closed quantization test ``distance <= eta`` with a relative tie allowance."""
    return distance <= eta * (1.0 + TIE_TOL)


class Grid:
    """
    Integer multiples of ``eta`` inside a finite union of boxes.

    Points are indexed densely in C order of the lattice spanned by the
    bounding box; for a union of boxes a mask drops lattice points that lie
    in no box. Coordinates are always ``k * eta`` for integer ``k``.
    """

    def __init__(self, boxes, eta):
        self.boxes = tuple(boxes)
        self.eta = float(eta)
        lower = np.min([box.lower for box in self.boxes], axis=0)
        upper = np.max([box.upper for box in self.boxes], axis=0)
        self.kmin = np.ceil(lower / self.eta - INDEX_TOL).astype(np.int64)
        kmax = np.floor(upper / self.eta + INDEX_TOL).astype(np.int64)
        self.shape = tuple(int(s) for s in kmax - self.kmin + 1)
        self.axes = [np.arange(k0, k1 + 1, dtype=np.int64) * self.eta
                     for k0, k1 in zip(self.kmin, kmax)]
        self.mask = None
        self.lattice_to_dense = None
        self.dense_to_lattice = None
        if len(self.boxes) > 1:
            mask = np.zeros(self.shape, dtype=bool)
            mesh = np.meshgrid(*self.axes, indexing='ij')
            points = np.stack([axis.ravel() for axis in mesh], axis=1)
            for box in self.boxes:
                mask |= box.contains(points).reshape(self.shape)
            self.mask = mask
            flat = mask.ravel()
            self.dense_to_lattice = np.flatnonzero(flat)
            self.lattice_to_dense = np.full(flat.size, -1, dtype=np.int64)
            self.lattice_to_dense[self.dense_to_lattice] = np.arange(self.dense_to_lattice.size)

    @property
    def dim(self):
        return len(self.shape)

    @property
    def lattice_size(self):
        return int(np.prod(self.shape))

    @property
    def size(self):
        if self.dense_to_lattice is not None:
            return int(self.dense_to_lattice.size)
        return self.lattice_size

    def multi_index(self, dense):
        """Per-axis lattice offsets of dense indices."""
        dense = np.asarray(dense, dtype=np.int64)
        lattice = dense if self.dense_to_lattice is None else self.dense_to_lattice[dense]
        return np.unravel_index(lattice, self.shape)

    def dense_index(self, multi):
        """Dense indices of per-axis lattice offsets (``-1`` outside the domain)."""
        multi = [np.asarray(k, dtype=np.int64) for k in multi]
        inside = np.ones(np.broadcast(*multi).shape, dtype=bool)
        for axis, k in enumerate(multi):
            inside &= (k >= 0) & (k < self.shape[axis])
        clipped = [np.clip(k, 0, size - 1) for k, size in zip(multi, self.shape)]
        lattice = np.ravel_multi_index(clipped, self.shape)
        dense = lattice if self.lattice_to_dense is None else self.lattice_to_dense[lattice]
        return np.where(inside, dense, -1)

    def coords(self, dense):
        """Coordinates of dense indices, shape ``(k, dim)``."""
        multi = self.multi_index(np.atleast_1d(dense))
        return np.stack([self.axes[a][multi[a]] for a in range(self.dim)], axis=-1)

    def points(self):
        return self.coords(np.arange(self.size))

    def nearest(self, x):
        """Dense index of the lattice point nearest to ``x`` (``-1`` outside)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        multi = [np.clip(np.rint(x[:, a] / self.eta).astype(np.int64) - self.kmin[a],
                         0, self.shape[a] - 1) for a in range(self.dim)]
        return self.dense_index(multi)

    def ball_ranges(self, images):
        """
        Per-axis lattice ranges of the closed ``eta``-balls around images.

        Parameters
        ----------
        images : numpy.ndarray
            Points, shape ``(k, dim)``.

        Returns
        -------
        (numpy.ndarray, numpy.ndarray, numpy.ndarray)
            ``lo`` and ``hi`` offsets of shape ``(k, dim)`` clipped to the
            lattice, and a flag per image whose ball misses the lattice.
        """
        images = np.atleast_2d(images)
        k = images.shape[0]
        lo = np.empty((k, self.dim), dtype=np.int64)
        hi = np.empty((k, self.dim), dtype=np.int64)
        for a in range(self.dim):
            c = images[:, a]
            base = np.floor(c / self.eta).astype(np.int64)
            first = np.full(k, np.iinfo(np.int64).max)
            last = np.full(k, np.iinfo(np.int64).min)
            for offset in range(-2, 3):
                cand = base + offset
                ok = within_eta(np.abs(cand * self.eta - c), self.eta)
                first = np.where(ok, np.minimum(first, cand), first)
                last = np.where(ok, np.maximum(last, cand), last)
            lo[:, a] = np.maximum(first - self.kmin[a], 0)
            hi[:, a] = np.minimum(last - self.kmin[a], self.shape[a] - 1)
        empty = np.any(lo > hi, axis=1)
        return lo, hi, empty

    def ball_members(self, images):
        """
        Dense indices of grid points within ``eta`` of each image.

        Returns
        -------
        numpy.ndarray
            Shape ``(k, 3**dim)`` with ``-1`` padding.
        """
        lo, hi, _ = self.ball_ranges(images)
        columns = []
        for offsets in itertools.product(range(3), repeat=self.dim):
            multi = [lo[:, a] + offsets[a] for a in range(self.dim)]
            valid = np.all([multi[a] <= hi[:, a] for a in range(self.dim)], axis=0)
            dense = self.dense_index(multi)
            columns.append(np.where(valid, dense, -1))
        return np.stack(columns, axis=1)

    def header(self):
        return {'eta': self.eta, 'boxes': [box.to_dict() for box in self.boxes]}


def build_grid(boxes, eta):
    """
    Quantize a finite union of boxes.

    Raises
    ------
    EtaTooLarge
        When ``eta`` exceeds the span of the domain.
    """
    boxes = tuple(boxes)
    if eta <= 0:
        raise ConfigError(f"quantization parameter must be positive, got {eta}")
    span = span_of(boxes)
    if eta > span * (1.0 + TIE_TOL):
        raise EtaTooLarge(eta, span)
    grid = Grid(boxes, eta)
    logger.debug("grid: eta=%g shape=%s points=%d", eta, grid.shape, grid.size)
    return grid


@dataclass(frozen=True)
class AugState:
    """Augmented state ``(x, p, l)``; ``x`` is a vector or a grid index."""

    x: Any
    p: int
    l: int = 0


def dwell_scenarios(p, l, modes, dwell_time):
    """Admissible ``(p', l')`` after a step in mode ``p`` with counter ``l``."""
    if l < dwell_time - 1:
        return [(p, l + 1)]
    return [(p, dwell_time - 1)] + [(q, 0) for q in range(modes) if q != p]


def concrete_successors(sub, state, u, w=None):
    """
    Successors of ``state`` in the dwell-time transition system.

    Returns
    -------
    list of AugState
        Empty when ``u`` differs from the active mode.
    """
    if u != state.p:
        return []
    x_next = sub.step(state.p, state.x, w)
    return [AugState(x_next, q, lq)
            for q, lq in dwell_scenarios(state.p, state.l, sub.m, sub.dwell_time)]


def check_dwell(switching, dwell_time):
    """Raise :class:`DwellViolation` if the sequence switches early."""
    l = 0
    for k in range(1, len(switching)):
        if switching[k] != switching[k - 1]:
            if l != dwell_time - 1:
                raise DwellViolation(k, dwell_time)
            l = 0
        else:
            l = min(l + 1, dwell_time - 1)


def random_admissible_switching(modes, dwell_time, length, rng, switch_prob=0.5):
    """Draw a mode sequence that respects the dwell time."""
    seq = [int(rng.integers(modes))]
    held = 1
    for _ in range(1, length):
        if modes > 1 and held >= dwell_time and rng.random() < switch_prob:
            choices = [q for q in range(modes) if q != seq[-1]]
            seq.append(int(rng.choice(choices)))
            held = 1
        else:
            seq.append(seq[-1])
            held += 1
    return seq


def run_equivalence_check(sub, x0, switching, internal_inputs, horizon):
    """
    Compare output runs of a switched subsystem and its transition system.

    Parameters
    ----------
    sub : SwitchedSubsystem
        The subsystem.
    x0 : array_like
        Initial state.
    switching : sequence of int
        Modes ``p_0 .. p_{K-1}``.
    internal_inputs : sequence of array_like
        Internal inputs ``w_0 .. w_{K-1}`` (ignored without internal input).
    horizon : int
        Number of steps ``K``.

    Returns
    -------
    bool
        Whether both output runs agree bit for bit.

    Raises
    ------
    DimensionMismatch
        If fewer than ``horizon`` modes or internal inputs are given.
    DwellViolation
        If the switching sequence switches before the dwell time elapsed.
    """
    if horizon < 0:
        raise ConfigError(f"horizon must be nonnegative, got {horizon}")
    if len(switching) < horizon:
        raise DimensionMismatch(f"{len(switching)} mode(s) given for a horizon of {horizon}")
    if sub.q and len(internal_inputs) < horizon:
        raise DimensionMismatch(f"{len(internal_inputs)} internal input(s) given for a horizon of {horizon}")
    switching = list(switching[:horizon])
    check_dwell(switching, sub.dwell_time)
    ws = [None if not sub.q else internal_inputs[k] for k in range(horizon)]

    x = np.asarray(x0, dtype=float)
    direct = [sub.output(x)]
    for k in range(horizon):
        x = sub.step(switching[k], x, ws[k])
        direct.append(sub.output(x))

    state = AugState(np.asarray(x0, dtype=float), switching[0] if switching else 0, 0)
    lifted = [sub.output(state.x)]
    for k in range(horizon):
        successors = concrete_successors(sub, state, switching[k], ws[k])
        wanted = switching[k + 1] if k + 1 < horizon else switching[k]
        matching = [s for s in successors if s.p == wanted]
        if not matching:
            raise DwellViolation(k + 1, sub.dwell_time)
        state = matching[0]
        lifted.append(sub.output(state.x))

    return all(np.array_equal(a, b) for a, b in zip(direct, lifted))


class FiniteTS:
    """
    Finite abstraction over augmented states ``(x̂, p, l)``.

    Augmented indices are layer-major: ``(p * k_d + l) * n_x + x̂``; the
    index ``n_aug`` is the absorbing sink reached by images whose
    ``eta``-ball holds no grid point. Transitions exist only for ``u = p``;
    rows of the optional materialized table are keyed by
    ``aug * n_w + ŵ``.
    """

    def __init__(self, sub, state_grid, internal_points, varpi, table=None):
        self.sub = sub
        self.grid = state_grid
        points = np.asarray(internal_points, dtype=float)
        self.internal_points = points.reshape(-1, sub.q) if sub.q else np.zeros((1, 0))
        self.varpi = float(varpi)
        self.table = table

    @property
    def eta(self):
        return self.grid.eta

    @property
    def modes(self):
        return self.sub.m

    @property
    def dwell_time(self):
        return self.sub.dwell_time

    @property
    def n_x(self):
        return self.grid.size

    @property
    def n_w(self):
        return self.internal_points.shape[0]

    @property
    def layers(self):
        return self.modes * self.dwell_time

    @property
    def n_aug(self):
        return self.layers * self.n_x

    @property
    def sink(self):
        return self.n_aug

    @property
    def materialized(self):
        return self.table is not None

    def layer(self, p, l):
        return p * self.dwell_time + l

    def aug_index(self, x_idx, p, l):
        return self.layer(p, l) * self.n_x + np.asarray(x_idx)

    def decode(self, aug):
        layer, x_idx = divmod(int(aug), self.n_x)
        p, l = divmod(layer, self.dwell_time)
        return AugState(x_idx, p, l)

    def images(self, x_idx, p, w_idx):
        """Concrete images ``f_p(x̂, ŵ)`` of grid states."""
        X = self.grid.coords(x_idx)
        W = np.repeat(self.internal_points[[w_idx]], X.shape[0], axis=0)
        return self.sub.image(p, X, W)

    def successor_points(self, x_idx, p, w_idx):
        """Grid successors per state, shape ``(k, 3**dim)`` with ``-1`` padding."""
        return self.grid.ball_members(self.images(np.atleast_1d(x_idx), p, w_idx))

    def _lazy_successors(self, state, w_idx):
        members = self.successor_points(state.x, state.p, w_idx)[0]
        members = np.unique(members[members >= 0])
        if members.size == 0:
            return np.array([self.sink], dtype=np.int64)
        out = [self.layer(q, lq) * self.n_x + members
               for q, lq in dwell_scenarios(state.p, state.l, self.modes, self.dwell_time)]
        return np.sort(np.concatenate(out)).astype(np.int64)

    def successors(self, aug, w_idx):
        """
        Sorted successor indices of ``(aug, u = p, ŵ)``.

        The sink is the only successor of its own and of every image whose
        ``eta``-ball contains no grid point.
        """
        if aug == self.sink:
            return np.array([self.sink], dtype=np.int64)
        if self.table is not None:
            row = int(aug) * self.n_w + int(w_idx)
            start, stop = self.table.indptr[row], self.table.indptr[row + 1]
            return self.table.indices[start:stop].astype(np.int64)
        return self._lazy_successors(self.decode(aug), w_idx)

    def lazy_successors(self, aug, w_idx):
        if aug == self.sink:
            return np.array([self.sink], dtype=np.int64)
        return self._lazy_successors(self.decode(aug), w_idx)

    def _table_chunk(self, x_range):
        x_idx = np.arange(*x_range, dtype=np.int64)
        rows, cols = [], []
        for p in range(self.modes):
            for w_idx in range(self.n_w):
                members = self.successor_points(x_idx, p, w_idx)
                empty = ~np.any(members >= 0, axis=1)
                for l in range(self.dwell_time):
                    aug = self.aug_index(x_idx, p, l)
                    row = aug * self.n_w + w_idx
                    for q, lq in dwell_scenarios(p, l, self.modes, self.dwell_time):
                        target = self.layer(q, lq) * self.n_x + members
                        valid = members >= 0
                        rows.append(np.broadcast_to(row[:, None], members.shape)[valid])
                        cols.append(target[valid])
                    rows.append(row[empty])
                    cols.append(np.full(int(empty.sum()), self.sink, dtype=np.int64))
        return np.concatenate(rows), np.concatenate(cols)

    def materialize(self, workers=1, chunk=4096):
        """Return a copy with a compressed sparse row successor table."""
        ranges = [(start, min(start + chunk, self.n_x)) for start in range(0, self.n_x, chunk)]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(self._table_chunk, ranges))
        else:
            parts = [self._table_chunk(r) for r in ranges]
        rows = np.concatenate([r for r, _ in parts]) if parts else np.zeros(0, dtype=np.int64)
        cols = np.concatenate([c for _, c in parts]) if parts else np.zeros(0, dtype=np.int64)
        shape = (self.n_aug * self.n_w, self.n_aug + 1)
        table = sparse.csr_matrix(
            (np.ones(rows.size, dtype=bool), (rows, cols)), shape=shape)
        table.sum_duplicates()
        table.sort_indices()
        logger.debug("materialized %d transitions over %d rows", table.nnz, shape[0])
        return FiniteTS(self.sub, self.grid, self.internal_points, self.varpi, table)


def abstract_successors(fts, state, u, w_idx):
    """
    Successors of an abstract augmented state.

    Parameters
    ----------
    fts : FiniteTS
        The abstraction.
    state : AugState
        ``(x̂ index, p, l)``.
    u : int
        External input; transitions exist only for ``u = p``.
    w_idx : int
        Index of ``ŵ`` in the internal point list.

    Returns
    -------
    list of AugState
        Successor states; the sink is reported as ``AugState(None, -1, -1)``.
    """
    if u != state.p:
        return []
    aug = fts.aug_index(state.x, state.p, state.l)
    result = []
    for succ in fts.successors(int(aug), w_idx):
        result.append(AugState(None, -1, -1) if succ == fts.sink else fts.decode(succ))
    return result


def internal_points_for(sub, internal):
    """Resolve an internal-input quantization parameter or explicit point list."""
    if sub.q == 0:
        return np.zeros((1, 0)), 0.0
    if np.isscalar(internal):
        varpi = float(internal)
        if varpi <= 0:
            raise ConfigError(
                "internal-input quantization 0 needs an explicit point list")
        return build_grid(sub.internal_domain, varpi).points(), varpi
    points = np.asarray(internal, dtype=float)
    if points.ndim == 1:
        points = points.reshape(-1, 1)
    if points.shape[1] != sub.q:
        raise DimensionMismatch(
            f"internal point list has width {points.shape[1]}, subsystem {sub.id} expects {sub.q}")
    return points, 0.0


def build_finite_ts(sub, eta, internal=None, materialize=False, workers=1):
    """
    Build the finite abstraction of a switched subsystem.

    Parameters
    ----------
    sub : SwitchedSubsystem
        Concrete subsystem.
    eta : float
        State quantization parameter.
    internal : float or array_like, optional
        Internal-input quantization parameter, or an explicit point list
        replacing the quantized internal domain.
    materialize : bool
        Whether to fill the sparse successor table up front.
    workers : int
        Threads used when materializing.

    Returns
    -------
    FiniteTS
        The abstraction.
    """
    logger.info('++ build_finite_ts subsystem=%s eta=%g', sub.id, eta)
    grid = build_grid(sub.state_domain, eta)
    points, varpi = internal_points_for(sub, internal if internal is not None else 0.0)
    fts = FiniteTS(sub, grid, points, varpi)
    if materialize:
        fts = fts.materialize(workers=workers)
    logger.info('-- build_finite_ts states=%d inputs=%d', fts.n_x, fts.n_w)
    return fts


def span_steps(span, eta):
    """Number of grid points of one axis of length ``span``."""
    return int(math.floor(span / eta + INDEX_TOL)) + 1
