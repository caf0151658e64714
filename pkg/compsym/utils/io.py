"""
Artifact persistence for compsym.

Abstractions and controllers are stored as numpy ``.npz`` archives whose
``header`` entry is a JSON document; reports are JSON and trajectories CSV.
Graphs export as DOT text.
"""

import csv
import json
import logging
import os

import numpy as np
from scipy import sparse

from compsym.abstraction import FiniteTS, Grid
from compsym.exceptions import ConfigError
from compsym.model import Box
from compsym.synthesis import AbstractController

logger = logging.getLogger(__name__)

DOT_STATE_LIMIT = 5000


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def to_json(document):
    return json.dumps(document, indent=2, sort_keys=True, default=_json_default)


def write_json_report(path, report):
    """Write a report document; returns the path."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(to_json(report))
        handle.write('\n')
    return path


def dump_finite_ts(path, fts):
    """
    Persist a finite abstraction with its successor table.

    Layout: ``header`` (JSON with ``eta``, ``varpi``, ``dwell_time``,
    ``modes``, ``n_x``, ``n_w``, ``dims`` and the grid boxes),
    ``internal_points`` and the CSR arrays ``indptr``, ``indices``,
    ``shape``. Unmaterialized abstractions are materialized first.
    """
    if not fts.materialized:
        fts = fts.materialize()
    header = {
        'subsystem': fts.sub.id,
        'eta': fts.eta,
        'varpi': fts.varpi,
        'dwell_time': fts.dwell_time,
        'modes': fts.modes,
        'n_x': fts.n_x,
        'n_w': fts.n_w,
        'dims': [fts.sub.n, fts.sub.q],
        'grid': fts.grid.header(),
    }
    table = fts.table
    np.savez(path,
             header=np.array(json.dumps(header)),
             internal_points=fts.internal_points,
             indptr=table.indptr,
             indices=table.indices,
             shape=np.array(table.shape, dtype=np.int64))
    logger.debug("dumped abstraction of subsystem %s to %s", fts.sub.id, path)
    return path


def load_finite_ts(path, sub):
    """Reload a dump written by :func:`dump_finite_ts` for subsystem ``sub``."""
    with np.load(path, allow_pickle=False) as archive:
        header = json.loads(str(archive['header']))
        if header['subsystem'] != sub.id or header['dims'] != [sub.n, sub.q]:
            raise ConfigError(f"dump {path} does not belong to subsystem {sub.id}")
        boxes = [Box.from_dict(box) for box in header['grid']['boxes']]
        grid = Grid(boxes, header['grid']['eta'])
        indices = archive['indices']
        table = sparse.csr_matrix(
            (np.ones(indices.size, dtype=bool), indices, archive['indptr']),
            shape=tuple(int(s) for s in archive['shape']))
        return FiniteTS(sub, grid, archive['internal_points'], header['varpi'], table)


def dump_controller(path, ctrl):
    """Persist the winning bitmap and the allowed-mode table."""
    header = {'modes': ctrl.modes, 'dwell_time': ctrl.dwell_time,
              'iterations': ctrl.iterations, 'history': ctrl.history}
    np.savez(path,
             header=np.array(json.dumps(header)),
             winning=np.packbits(ctrl.winning, axis=-1),
             allowed=np.packbits(ctrl.allowed, axis=-1),
             n_x=np.array(ctrl.winning.shape[1]))
    return path


def load_controller(path):
    with np.load(path, allow_pickle=False) as archive:
        header = json.loads(str(archive['header']))
        n_x = int(archive['n_x'])
        winning = np.unpackbits(archive['winning'], axis=-1, count=n_x).astype(bool)
        allowed = np.unpackbits(archive['allowed'], axis=-1, count=n_x).astype(bool)
    return AbstractController(header['modes'], header['dwell_time'], winning, allowed,
                              header['iterations'], header['history'])


def write_trajectory_csv(path, result, state_dim):
    """
    Write closed-loop rows as ``step, subsystem, x0 .. x{n-1}, mode``.

    An empty trajectory still gets the header line.
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(['step', 'subsystem'] + [f'x{a}' for a in range(state_dim)] + ['mode'])
        for step, subsystem, state, mode in result.rows:
            padded = list(state) + [''] * (state_dim - len(state))
            writer.writerow([step, subsystem] + padded + [mode])
    return path


def finite_ts_to_dot(fts, max_states=DOT_STATE_LIMIT):
    """
    DOT text of a small abstraction; edges are labelled with the input index.

    Raises
    ------
    ConfigError
        When the abstraction has more than ``max_states`` augmented states.
    """
    if fts.n_aug > max_states:
        raise ConfigError(f"DOT export limited to {max_states} states, abstraction has {fts.n_aug}")
    lines = [f'digraph abstraction_{fts.sub.id} {{']
    for aug in range(fts.n_aug):
        state = fts.decode(aug)
        coords = ', '.join(f'{c:g}' for c in fts.grid.coords([state.x])[0])
        lines.append(f'  {aug} [label="({coords}) p={state.p} l={state.l}"];')
    lines.append(f'  {fts.sink} [label="sink", shape=box];')
    for aug in range(fts.n_aug):
        for w_idx in range(fts.n_w):
            for succ in fts.successors(aug, w_idx):
                lines.append(f'  {aug} -> {int(succ)} [label="w{w_idx}"];')
    lines.append('}')
    return '\n'.join(lines) + '\n'


def gain_digraph_to_dot(gm):
    """DOT text of the gain digraph with edges ``i -> j`` for nonzero ``gamma_ij``."""
    lines = ['digraph gains {']
    for i in range(gm.size):
        lines.append(f'  {i};')
    for i, j in sorted(gm.digraph().edges()):
        slope = gm[i, j].linear_slope()
        label = f'{slope:.4g}' if slope is not None else 'nonlinear'
        lines.append(f'  {i} -> {j} [label="{label}"];')
    lines.append('}')
    return '\n'.join(lines) + '\n'


def write_text(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(text)
    return path
