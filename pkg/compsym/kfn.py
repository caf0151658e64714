"""
Class-K-infinity functions.

A closed symbolic algebra (linear, power, composition, pointwise maximum)
used for every comparison function of a certificate: Lyapunov bounds,
input gains, triangle gains, output Lipschitz bounds and small-gain
entries. Keeping the representation symbolic makes inverses and
cycle-gain comparisons exact where the algebra allows it.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from compsym.exceptions import NotInvertibleRepresentation


def _result(values, s):
    if np.ndim(s) == 0:
        return float(values)
    return values


class KFn:
    """Base class of the K-infinity algebra."""

    def __call__(self, s):
        """
        Evaluate the function.

        Parameters
        ----------
        s : float or numpy.ndarray
            Nonnegative argument(s).

        Returns
        -------
        float or numpy.ndarray
            Function value(s), same shape as ``s``.
        """
        arr = np.asarray(s, dtype=float)
        return _result(self._eval(arr), s)

    def _eval(self, s):
        raise NotImplementedError

    def inverse(self):
        raise NotInvertibleRepresentation(self)

    def compose(self, inner):
        """Return ``self ∘ inner``."""
        return Compose(self, inner)

    def power_form(self) -> Optional[Tuple[float, float]]:
        """Reduce to ``coeff * s**exponent`` when the expression allows it."""
        return None

    def linear_slope(self) -> Optional[float]:
        """Slope when the function is ``slope * s``, otherwise ``None``."""
        form = self.power_form()
        if form is not None and form[1] == 1.0:
            return form[0]
        return None

    @property
    def is_linear(self):
        return self.linear_slope() is not None

    @property
    def is_zero(self):
        return self.linear_slope() == 0.0

    def to_dict(self):
        raise NotImplementedError


@dataclass(frozen=True)
class Linear(KFn):
    """``s -> slope * s``. A zero slope denotes the identically-zero gain."""

    slope: float

    def __post_init__(self):
        if not (self.slope >= 0.0) or math.isinf(self.slope):
            raise ValueError(f"linear slope must be finite and nonnegative, got {self.slope}")

    def _eval(self, s):
        return self.slope * s

    def inverse(self):
        if self.slope == 0.0:
            raise NotInvertibleRepresentation(self)
        return Linear(1.0 / self.slope)

    def power_form(self):
        return (float(self.slope), 1.0)

    def to_dict(self):
        return {'kind': 'linear', 'slope': self.slope}


@dataclass(frozen=True)
class Power(KFn):
    """``s -> coeff * s**exponent``."""

    coeff: float
    exponent: float

    def __post_init__(self):
        if not (self.coeff > 0.0 and self.exponent > 0.0):
            raise ValueError(f"power form needs positive coeff and exponent, got {self}")

    def _eval(self, s):
        return self.coeff * np.power(s, self.exponent)

    def inverse(self):
        return Power(self.coeff ** (-1.0 / self.exponent), 1.0 / self.exponent)

    def power_form(self):
        return (float(self.coeff), float(self.exponent))

    def to_dict(self):
        return {'kind': 'power', 'coeff': self.coeff, 'exponent': self.exponent}


@dataclass(frozen=True)
class Compose(KFn):
    """``s -> outer(inner(s))``."""

    outer: KFn
    inner: KFn

    def _eval(self, s):
        return self.outer._eval(self.inner._eval(s))

    def inverse(self):
        return Compose(self.inner.inverse(), self.outer.inverse())

    def power_form(self):
        outer = self.outer.power_form()
        inner = self.inner.power_form()
        if outer is None or inner is None:
            return None
        c1, e1 = outer
        c2, e2 = inner
        return (c1 * c2 ** e1, e1 * e2)

    def to_dict(self):
        return {'kind': 'compose', 'outer': self.outer.to_dict(), 'inner': self.inner.to_dict()}


@dataclass(frozen=True)
class Max(KFn):
    """Pointwise maximum of its parts."""

    parts: Tuple[KFn, ...]

    def __post_init__(self):
        if len(self.parts) == 0:
            raise ValueError("Max needs at least one part")
        object.__setattr__(self, 'parts', tuple(self.parts))

    def _eval(self, s):
        return np.maximum.reduce([part._eval(s) for part in self.parts])

    def power_form(self):
        slopes = [part.linear_slope() for part in self.parts]
        if any(slope is None for slope in slopes):
            return None
        return (max(slopes), 1.0)

    def to_dict(self):
        return {'kind': 'max', 'parts': [part.to_dict() for part in self.parts]}


IDENTITY = Linear(1.0)
ZERO = Linear(0.0)


def from_dict(data):
    """Rebuild a KFn from :meth:`KFn.to_dict` output."""
    kind = data['kind']
    if kind == 'linear':
        return Linear(float(data['slope']))
    if kind == 'power':
        return Power(float(data['coeff']), float(data['exponent']))
    if kind == 'compose':
        return Compose(from_dict(data['outer']), from_dict(data['inner']))
    if kind == 'max':
        return Max(tuple(from_dict(part) for part in data['parts']))
    raise ValueError(f"unknown KFn kind '{kind}'")


def compose_chain(functions):
    """Compose ``f1 ∘ f2 ∘ ... ∘ fr`` (the first entry is applied last)."""
    functions = list(functions)
    if not functions:
        return IDENTITY
    result = functions[-1]
    for f in reversed(functions[:-1]):
        result = Compose(f, result)
    return result


@dataclass(frozen=True)
class SampleGrid:
    """Geometric sample set on ``[low, high]`` used for sampled comparisons."""

    low: float = 1e-6
    high: float = 1e6
    count: int = 241

    def points(self):
        return np.geomspace(self.low, self.high, self.count)


DEFAULT_SAMPLES = SampleGrid()


@dataclass(frozen=True)
class LtIdentity:
    holds: bool
    witness: Optional[float] = None

    def __bool__(self):
        return self.holds


def _analytic_lt_identity(f):
    if isinstance(f, Max):
        for part in f.parts:
            verdict = _analytic_lt_identity(part)
            if verdict is None:
                return None
            if not verdict.holds:
                return verdict
        return LtIdentity(True)
    form = f.power_form()
    if form is None:
        return None
    coeff, exponent = form
    if coeff == 0.0:
        return LtIdentity(True)
    if exponent == 1.0:
        return LtIdentity(True) if coeff < 1.0 else LtIdentity(False, 1.0)
    # a pure power crosses the identity once; report a point past the crossing
    if exponent > 1.0:
        return LtIdentity(False, 2.0 * coeff ** (-1.0 / (exponent - 1.0)))
    return LtIdentity(False, 0.5 * coeff ** (1.0 / (1.0 - exponent)))


def lt_identity(f, samples=DEFAULT_SAMPLES):
    """
    Decide whether ``f(s) < s`` for all ``s > 0``.

    The sampled test runs first; when ``f`` reduces to a power form the
    analytic comparison decides the remaining cases exactly.

    Parameters
    ----------
    f : KFn
        Function to compare against the identity.
    samples : SampleGrid, optional
        Sample set for the sampled test.

    Returns
    -------
    LtIdentity
        Verdict plus a violating argument when the verdict is negative.
    """
    grid = samples.points()
    values = f(grid)
    bad = np.flatnonzero(values >= grid)
    if bad.size:
        return LtIdentity(False, float(grid[bad[0]]))
    analytic = _analytic_lt_identity(f)
    if analytic is not None and not analytic.holds:
        return analytic
    return LtIdentity(True)
