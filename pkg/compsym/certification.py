"""
Incremental stability certificates and alternating simulation functions.

Lyapunov functions are weighted infinity norms ``V_p(x, x̂) = |M_p (x - x̂)|``
with a positive diagonal ``M_p`` per mode. For affine modes every quantity of
the certificate (contraction, input gain, mode-change factor, triangle gain)
is an induced-norm computation, so the certificate is exact by construction
and the sampled checks only guard against misuse.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from compsym.abstraction import dwell_scenarios
from compsym.exceptions import (
    BadEpsilon,
    BadSplitters,
    CertificateRejected,
    DimensionMismatch,
    DwellTooSmall,
    NotContractive,
)
from compsym.kfn import IDENTITY, KFn, Linear
from compsym.model import in_domain, sample_boxes

logger = logging.getLogger(__name__)

SAMPLE_RTOL = 1e-9
SAMPLE_ATOL = 1e-12
MAX_WITNESSES = 20


def weighted_norm(weights, d):
    """``max_a |weights_a * d_a|`` along the last axis."""
    return np.max(np.abs(np.asarray(weights) * np.asarray(d)), axis=-1)


def exceeds_tolerance(lhs, rhs):
    return lhs > rhs + SAMPLE_RTOL * np.abs(rhs) + SAMPLE_ATOL


@dataclass
class FalsificationReport:
    """Outcome of a sampled check: counts plus a capped witness list."""

    checked: int = 0
    violations: int = 0
    skipped: int = 0
    witnesses: List[dict] = field(default_factory=list)

    @property
    def passed(self):
        return self.violations == 0

    def add(self, witness):
        self.violations += 1
        if len(self.witnesses) < MAX_WITNESSES:
            self.witnesses.append(witness)

    def merge(self, other):
        self.checked += other.checked
        self.skipped += other.skipped
        self.violations += other.violations
        room = MAX_WITNESSES - len(self.witnesses)
        self.witnesses.extend(other.witnesses[:max(room, 0)])
        return self

    def to_dict(self):
        return {
            'checked': self.checked,
            'violations': self.violations,
            'skipped': self.skipped,
            'passed': self.passed,
            'witnesses': self.witnesses,
        }


def require_passed(report, what):
    """Raise :class:`CertificateRejected` unless ``report`` passed."""
    if not report.passed:
        logger.warning("%s rejected: %d violation(s)", what, report.violations)
        raise CertificateRejected(what, report.violations)
    return report


@dataclass(frozen=True, eq=False)
class LyapCert:
    """
    Mode-indexed incremental Lyapunov certificate.

    Parameters
    ----------
    weights : tuple of numpy.ndarray
        Diagonal of ``M_p`` per mode.
    kappa : tuple of float
        Contraction factor per mode, each in ``(0, 1)``.
    rho : tuple of KFn
        Internal-input gain per mode.
    mu : float
        Mode-change factor, ``V_p <= mu V_q`` for all mode pairs.
    gamma : tuple of KFn
        Triangle gains per mode.
    common : bool
        Whether every mode uses the same Lyapunov function.
    """

    weights: Tuple[np.ndarray, ...]
    kappa: Tuple[float, ...]
    rho: Tuple[KFn, ...]
    mu: float
    gamma: Tuple[KFn, ...]
    common: bool

    @property
    def modes(self):
        return len(self.weights)

    @property
    def weight_matrix(self):
        return np.vstack(self.weights)

    @property
    def lower(self):
        return tuple(Linear(float(np.min(w))) for w in self.weights)

    @property
    def upper(self):
        return tuple(Linear(float(np.max(w))) for w in self.weights)

    def evaluate(self, p, x, xhat):
        """``V_p(x, x̂)``; ``p`` may be an array matching a batch of rows."""
        w = self.weight_matrix[np.asarray(p)]
        return weighted_norm(w, np.asarray(x, dtype=float) - np.asarray(xhat, dtype=float))

    def to_dict(self):
        return {
            'weights': [w.tolist() for w in self.weights],
            'kappa': list(self.kappa),
            'rho': [r.to_dict() for r in self.rho],
            'mu': self.mu,
            'gamma': [g.to_dict() for g in self.gamma],
            'common': self.common,
        }


def _resolve_weights(sub, weights):
    if weights is None:
        weights = [np.ones(sub.n)] * sub.m
    weights = [np.asarray(w, dtype=float).reshape(-1) for w in weights]
    if len(weights) == 1 and sub.m > 1:
        weights = weights * sub.m
    if len(weights) != sub.m or any(w.size != sub.n for w in weights):
        raise DimensionMismatch(f"expected {sub.m} weight vector(s) of length {sub.n}")
    if any(np.any(w <= 0) for w in weights):
        raise ValueError("Lyapunov weights must be positive")
    return weights


def certify_delta_iss_affine(sub, weights=None):
    """
    Certify incremental stability of every mode of an affine subsystem.

    Parameters
    ----------
    sub : SwitchedSubsystem
        Subsystem with affine modes.
    weights : sequence of array_like, optional
        Diagonal of ``M_p`` per mode (a single vector is shared by all
        modes); defaults to all ones.

    Returns
    -------
    LyapCert
        The certificate.

    Raises
    ------
    NotContractive
        If ``|M_p A_p M_p^-1|`` is not below one for some mode.
    """
    weights = _resolve_weights(sub, weights)
    kappa, rho, gamma = [], [], []
    for p, (mode, w) in enumerate(zip(sub.modes, weights)):
        scaled = w[:, None] * mode.A / w[None, :]
        k = float(np.max(np.abs(scaled).sum(axis=1)))
        if k >= 1.0:
            raise NotContractive(p, k)
        kappa.append(k)
        gain = float(np.max(np.abs(w[:, None] * mode.D).sum(axis=1))) if sub.q else 0.0
        rho.append(Linear(gain))
        gamma.append(Linear(float(np.max(w))))
    mu = max(float(np.max(wp / wq)) for wp in weights for wq in weights)
    common = all(np.array_equal(weights[0], w) for w in weights[1:])
    cert = LyapCert(tuple(weights), tuple(kappa), tuple(rho), mu, tuple(gamma), common)
    logger.debug("subsystem %s: kappa=%s mu=%g common=%s", sub.id, kappa, mu, common)
    return cert


def _sample_pairs(sub, count, rng):
    X = sample_boxes(sub.state_domain, count, rng)[0]
    Xh = sample_boxes(sub.state_domain, count, rng)[0]
    if sub.q:
        W = sample_boxes(sub.internal_domain, count, rng)[0]
        Wh = sample_boxes(sub.internal_domain, count, rng)[0]
    else:
        W = Wh = np.zeros((count, 0))
    return X, Xh, W, Wh


def _aligned_pairs(sub, cert, p):
    """Pairs aligned with each row of the scaled mode matrix, where the contraction bound is tight."""
    w = cert.weights[p]
    scaled = w[:, None] * sub.modes[p].A / w[None, :]
    signs = np.where(scaled >= 0, 1.0, -1.0)
    directions = signs / w[None, :]
    X, Xh = [], []
    for box in sub.state_domain:
        centre = (box.lower + box.upper) / 2.0
        step = 0.25 * box.span / np.max(np.abs(directions), axis=1, keepdims=True)
        X.append(centre + step * directions)
        Xh.append(np.repeat(centre[None, :], directions.shape[0], axis=0))
    return np.vstack(X), np.vstack(Xh)


def check_cert_sampled(sub, cert, count, rng):
    """
    Falsify a :class:`LyapCert` on random and structured samples.

    Checks the sandwich bounds, the contraction inequality, the
    mode-change factor and the triangle inequality.

    Parameters
    ----------
    sub : SwitchedSubsystem
        The certified subsystem.
    cert : LyapCert
        Certificate under test.
    count : int
        Number of random tuples.
    rng : numpy.random.Generator
        Source of randomness.

    Returns
    -------
    FalsificationReport
        Violations with witness tuples.
    """
    report = FalsificationReport()
    X, Xh, W, Wh = _sample_pairs(sub, count, rng)
    for p in range(sub.m):
        PX, PXh = _aligned_pairs(sub, cert, p)
        PW = np.zeros((PX.shape[0], sub.q))
        if sub.q:
            wbox = sub.internal_domain[0]
            PW[:] = (wbox.lower + wbox.upper) / 2.0
        AX, AXh = np.vstack([PX, X]), np.vstack([PXh, Xh])
        AW, AWh = np.vstack([PW, W]), np.vstack([PW, Wh])
        dist = np.max(np.abs(AX - AXh), axis=1)
        V = cert.evaluate(p, AX, AXh)

        lo, hi = cert.lower[p](dist), cert.upper[p](dist)
        for k in np.flatnonzero(exceeds_tolerance(lo, V) | exceeds_tolerance(V, hi)):
            report.add({'check': 'bounds', 'mode': p, 'x': AX[k].tolist(), 'xhat': AXh[k].tolist()})

        FX, FXh = sub.image(p, AX, AW), sub.image(p, AXh, AWh)
        lhs = cert.evaluate(p, FX, FXh)
        wdist = np.max(np.abs(AW - AWh), axis=1) if sub.q else np.zeros(len(AX))
        rhs = cert.kappa[p] * V + cert.rho[p](wdist)
        for k in np.flatnonzero(exceeds_tolerance(lhs, rhs)):
            report.add({
                'check': 'contraction', 'mode': p, 'x': AX[k].tolist(), 'xhat': AXh[k].tolist(),
                'w': AW[k].tolist(), 'what': AWh[k].tolist(), 'lhs': float(lhs[k]), 'rhs': float(rhs[k]),
            })

        for q in range(sub.m):
            Vq = cert.evaluate(q, AX, AXh)
            for k in np.flatnonzero(exceeds_tolerance(V, cert.mu * Vq)):
                report.add({'check': 'mode_change', 'mode': p, 'other': q, 'x': AX[k].tolist(),
                            'xhat': AXh[k].tolist()})

        if count:
            Z = sample_boxes(sub.state_domain, X.shape[0], rng)[0]
            lhs = cert.evaluate(p, X, Xh)
            rhs = cert.evaluate(p, X, Z) + cert.gamma[p](np.max(np.abs(Xh - Z), axis=1))
            for k in np.flatnonzero(exceeds_tolerance(lhs, rhs)):
                report.add({'check': 'triangle', 'mode': p, 'x': X[k].tolist(), 'y': Xh[k].tolist(),
                            'z': Z[k].tolist()})
        report.checked += AX.shape[0]
    logger.debug("certificate check of subsystem %s: %d checked, %d violation(s)",
                 sub.id, report.checked, report.violations)
    return report


def min_dwell_time(cert, epsilon):
    """
    Smallest dwell time admitted by the mode-dependent certificate.

    Returns
    -------
    int
        ``ceil(max_p epsilon ln(mu) / ln(1 / kappa_p) + 1)``.

    Raises
    ------
    BadEpsilon
        If ``epsilon <= 1``.
    """
    if not epsilon > 1.0:
        raise BadEpsilon(epsilon)
    bound = max(epsilon * math.log(cert.mu) / math.log(1.0 / k) + 1.0 for k in cert.kappa)
    return max(1, int(math.ceil(bound - 1e-9)))


@dataclass(frozen=True, eq=False)
class AltSimCert:
    """
    Alternating simulation function from a subsystem to its abstraction.

    ``evaluate`` returns ``kappa_p**(-l/epsilon) V_p(x, x̂)``, or ``V(x, x̂)``
    when the certificate is common to all modes.
    """

    cert: LyapCert
    eta: float
    varpi: float
    epsilon: float
    dwell_time: int
    splitters: Tuple[float, float, float]
    alpha: KFn
    sigma: float
    rho_hat: KFn
    eps_tilde: float
    eps_hat: Optional[float] = None

    @property
    def absorbed(self):
        return self.splitters[2] == 0.0

    def scale(self, p, l):
        if self.cert.common:
            return np.ones(np.broadcast(np.asarray(p), np.asarray(l)).shape)
        kappa = np.asarray(self.cert.kappa)[np.asarray(p)]
        return kappa ** (-np.asarray(l, dtype=float) / self.epsilon)

    def evaluate(self, p, l, x, xhat):
        value = self.cert.evaluate(p, x, xhat)
        if self.cert.common:
            return value
        return self.scale(p, l) * value

    def with_eps_tilde(self, eps_tilde):
        return AltSimCert(self.cert, self.eta, self.varpi, self.epsilon, self.dwell_time,
                          self.splitters, self.alpha, self.sigma, self.rho_hat, eps_tilde,
                          self.eps_hat)

    def with_radius(self, eps_hat):
        return AltSimCert(self.cert, self.eta, self.varpi, self.epsilon, self.dwell_time,
                          self.splitters, self.alpha, self.sigma, self.rho_hat, self.eps_tilde,
                          eps_hat)

    def to_dict(self):
        return {
            'eta': self.eta,
            'varpi': self.varpi,
            'epsilon': self.epsilon,
            'dwell_time': self.dwell_time,
            'splitters': list(self.splitters),
            'alpha': self.alpha.to_dict(),
            'sigma': self.sigma,
            'rho_hat': self.rho_hat.to_dict(),
            'eps_tilde': self.eps_tilde,
            'eps_hat': self.eps_hat,
            'cert': self.cert.to_dict(),
        }


def _check_splitters(splitters):
    theta = tuple(float(t) for t in splitters)
    if len(theta) != 3:
        raise BadSplitters(f"expected three splitting weights, got {len(theta)}")
    t1, t2, t3 = theta
    if not (0.0 < t1 < 1.0 and 0.0 < t2 < 1.0 and 0.0 <= t3 < 1.0):
        raise BadSplitters(f"splitting weights out of range: {theta}")
    if abs(t1 + t2 + t3 - 1.0) > 1e-9:
        raise BadSplitters(f"splitting weights must sum to 1, got {t1 + t2 + t3}")
    return theta


def build_alt_sim(cert, eta, varpi, epsilon, dwell_time, splitters, output_lipschitz=IDENTITY):
    """
    Derive the alternating simulation function and its parameters.

    With ``splitters[2] == 0`` the quantization error is absorbed into the
    maximum (single-box grids always contain a successor within
    ``max(|x' - f̂|_a, eta)`` of an in-domain ``x'`` per axis); otherwise it is
    split off additively with weight ``splitters[2]``.

    Parameters
    ----------
    cert : LyapCert
        Certificate of the subsystem.
    eta, varpi : float
        State and internal-input quantization parameters.
    epsilon : float
        Dwell exponent, ``> 1``.
    dwell_time : int
        Dwell time of the subsystem.
    splitters : tuple of float
        ``(theta1, theta2, theta3)`` summing to one.
    output_lipschitz : KFn
        Bound on the output map used to build ``alpha``.

    Returns
    -------
    AltSimCert
        Candidate certificate; gate it with :func:`verify_alt_sim_sampled`.

    Raises
    ------
    BadEpsilon, DwellTooSmall, BadSplitters
        When the preconditions of the derivation fail.
    """
    required = min_dwell_time(cert, epsilon)
    if dwell_time < required:
        raise DwellTooSmall(dwell_time, required)
    t1, t2, t3 = _check_splitters(splitters)
    kappa = np.asarray(cert.kappa)
    if cert.common:
        sigma0, amplify = float(np.max(kappa)), 1.0
    else:
        sigma0 = float(np.max(kappa ** ((epsilon - 1.0) / epsilon)))
        amplify = float(np.max(kappa ** (-(dwell_time - 1.0) / epsilon)))
    sigma = sigma0 / t1
    if sigma >= 1.0:
        raise BadSplitters(f"theta1={t1} too small for contraction {sigma0:.6g}")
    rho_max = max(r.linear_slope() for r in cert.rho)
    gamma_max = max(g(eta) for g in cert.gamma)
    eps_tilde = amplify * gamma_max if t3 == 0.0 else amplify * gamma_max / t3
    alpha = Linear(float(np.min(cert.weight_matrix))).compose(output_lipschitz.inverse())
    asc = AltSimCert(cert, float(eta), float(varpi), float(epsilon), int(dwell_time), (t1, t2, t3),
                     alpha, sigma, Linear(amplify * rho_max / t2), float(eps_tilde))
    logger.debug("alternating simulation: sigma=%g rho_hat=%g eps_tilde=%g",
                 sigma, asc.rho_hat.linear_slope(), eps_tilde)
    return asc


def relation_radius(asc, alpha_tilde=None):
    """Output radius ``alpha_tilde^-1(eps_tilde)`` of the induced relation."""
    alpha_tilde = asc.alpha if alpha_tilde is None else alpha_tilde
    inverse = alpha_tilde.inverse()
    if asc.eps_tilde == 0.0:
        return 0.0
    return float(inverse(asc.eps_tilde))


@dataclass
class TupleVerdict:
    status: str
    lhs: float = 0.0
    rhs: float = 0.0


def successor_margin(sub, fts, asc, X, P, L, x_idx, W, w_idx):
    """
    Vectorized check of the transition display for a batch of tuples.

    Returns
    -------
    (numpy.ndarray, numpy.ndarray, numpy.ndarray)
        Status codes (0 ok, 1 violation, 2 skipped), worst ``S'`` and bound.
    """
    k = X.shape[0]
    Xh = fts.grid.coords(x_idx)
    Wh = fts.internal_points[w_idx]
    S = asc.evaluate(P, L, X, Xh)
    wdist = np.max(np.abs(W - Wh), axis=1) if sub.q else np.zeros(k)
    bound = np.maximum(np.maximum(asc.sigma * S, asc.rho_hat(wdist)), asc.eps_tilde)

    status = np.zeros(k, dtype=np.int8)
    worst = np.zeros(k)
    Xn = np.empty_like(X)
    Fh = np.empty_like(X)
    for p in np.unique(P):
        rows = np.flatnonzero(P == p)
        Xn[rows] = sub.image(p, X[rows], W[rows] if sub.q else None)
        Fh[rows] = sub.image(p, Xh[rows], Wh[rows] if sub.q else None)
    outside = ~in_domain(sub.state_domain, Xn)
    members = fts.grid.ball_members(Fh)
    empty = ~np.any(members >= 0, axis=1)
    status[outside | empty] = 2

    coords = fts.grid.coords(np.where(members >= 0, members, 0).ravel()).reshape(k, members.shape[1], -1)
    for row in np.flatnonzero(status == 0):
        valid = members[row] >= 0
        for q, lq in dwell_scenarios(int(P[row]), int(L[row]), fts.modes, fts.dwell_time):
            candidates = asc.evaluate(q, lq, Xn[row][None, :], coords[row][valid])
            best = float(np.min(candidates))
            worst[row] = max(worst[row], best)
            if exceeds_tolerance(best, bound[row]):
                status[row] = 1
    return status, worst, bound


def check_alt_sim_tuple(sub, fts, asc, x, p, l, x_idx, w=None, w_idx=0):
    """
    Check both alternating-simulation displays on one tuple.

    Returns
    -------
    TupleVerdict
        ``status`` is ``'ok'``, ``'violation'`` or ``'skipped'``.
    """
    X = np.asarray(x, dtype=float).reshape(1, sub.n)
    W = np.asarray(w if w is not None else np.zeros(sub.q), dtype=float).reshape(1, sub.q)
    P, L = np.array([p]), np.array([l])
    idx = np.array([x_idx])
    Xh = fts.grid.coords(idx)
    S = asc.evaluate(P, L, X, Xh)
    lower = asc.alpha(np.max(np.abs(sub.output(X) - sub.output(Xh)), axis=1))
    if exceeds_tolerance(lower, S)[0]:
        return TupleVerdict('violation', float(lower[0]), float(S[0]))
    status, worst, bound = successor_margin(sub, fts, asc, X, P, L, idx, W, np.array([w_idx]))
    names = {0: 'ok', 1: 'violation', 2: 'skipped'}
    return TupleVerdict(names[int(status[0])], float(worst[0]), float(bound[0]))


def _sample_tuples(sub, fts, count, rng):
    P = rng.integers(sub.m, size=count)
    L = rng.integers(sub.dwell_time, size=count)
    x_idx = rng.integers(fts.n_x, size=count)
    Xh = fts.grid.coords(x_idx)
    X, lower, upper = sample_boxes(sub.state_domain, count, rng)
    near = rng.random(count) < 0.5
    jitter = rng.uniform(-3.0 * fts.eta, 3.0 * fts.eta, size=(count, sub.n))
    X[near] = np.clip(Xh[near] + jitter[near], lower[near], upper[near])
    if sub.q:
        W = sample_boxes(sub.internal_domain, count, rng)[0]
    else:
        W = np.zeros((count, 0))
    w_idx = rng.integers(fts.n_w, size=count)
    return X, P, L, x_idx, W, w_idx


def verify_alt_sim_sampled(sub, fts, asc, count, rng):
    """
    Falsify an :class:`AltSimCert` on random tuples.

    The existential choice of abstract successor is resolved by minimizing
    ``S'`` over the ``eta``-ball of the abstract image for every admissible
    ``(p', l')``. Tuples whose concrete successor leaves the state domain,
    or whose abstract image has an empty ball, are counted as skipped.

    Parameters
    ----------
    sub : SwitchedSubsystem
        Concrete subsystem.
    fts : FiniteTS
        Its abstraction.
    asc : AltSimCert
        Certificate under test.
    count : int
        Number of random tuples.
    rng : numpy.random.Generator
        Source of randomness.

    Returns
    -------
    FalsificationReport
        Violations of either display.
    """
    report = FalsificationReport(checked=count)
    if count == 0:
        return report
    X, P, L, x_idx, W, w_idx = _sample_tuples(sub, fts, count, rng)
    Xh = fts.grid.coords(x_idx)
    S = asc.evaluate(P, L, X, Xh)
    lower = asc.alpha(np.max(np.abs(sub.output(X) - sub.output(Xh)), axis=1))
    for k in np.flatnonzero(exceeds_tolerance(lower, S)):
        report.add({'display': 'output', 'x': X[k].tolist(), 'xhat': Xh[k].tolist(),
                    'mode': int(P[k]), 'dwell': int(L[k])})
    status, worst, bound = successor_margin(sub, fts, asc, X, P, L, x_idx, W, w_idx)
    report.skipped = int(np.sum(status == 2))
    for k in np.flatnonzero(status == 1):
        report.add({
            'display': 'transition', 'x': X[k].tolist(), 'xhat': Xh[k].tolist(),
            'mode': int(P[k]), 'dwell': int(L[k]), 'w': W[k].tolist(),
            'what': fts.internal_points[w_idx[k]].tolist(),
            'lhs': float(worst[k]), 'rhs': float(bound[k]),
        })
    logger.debug("alternating simulation check of subsystem %s: %d violation(s), %d skipped",
                 sub.id, report.violations, report.skipped)
    return report
