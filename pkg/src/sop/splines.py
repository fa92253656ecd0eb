"""B-spline bases on equally spaced knots and difference penalties."""

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .errors import InvalidArgumentError, OutOfDomainError

# relative slack on the domain bounds, absorbs round-off in user grids
_DOMAIN_SLACK = 1e-12


@dataclass(frozen=True)
class KnotVector:
    """Equally spaced knots with ``degree`` extension knots on each side.

    Attributes
    ----------
    knots : numpy.ndarray, shape (n_seg + 2 * degree + 1,)
        Full knot sequence, strictly increasing.
    degree : int
        Spline degree.
    n_seg : int
        Number of interior segments.
    """

    knots: np.ndarray
    degree: int
    n_seg: int

    @property
    def n_basis(self):
        return self.n_seg + self.degree

    @property
    def x_min(self):
        return float(self.knots[self.degree])

    @property
    def x_max(self):
        return float(self.knots[self.degree + self.n_seg])

    @property
    def spacing(self):
        return (self.x_max - self.x_min) / self.n_seg

    def greville(self):
        """Knot averages, one per basis function.

        For ``degree == 0`` the segment midpoints are returned instead.
        """
        t, p = self.knots, self.degree
        if p == 0:
            return 0.5 * (t[:-1] + t[1:])
        return np.array([t[j + 1:j + p + 1].mean() for j in range(self.n_basis)])


@dataclass(frozen=True)
class BasisMatrix:
    """Dense B-spline regression matrix together with its knots."""

    values: np.ndarray
    knots: KnotVector

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class DifferenceMatrix:
    """Matrix form of the order-``order`` forward difference on ``dim`` coefficients."""

    order: int
    dim: int
    values: np.ndarray


def make_knots(x_min, x_max, n_seg, degree):
    """Build an equally spaced knot vector covering ``[x_min, x_max]``.

    Parameters
    ----------
    x_min, x_max : float
        Domain bounds, ``x_min < x_max``.
    n_seg : int
        Number of interior segments (at least 1).
    degree : int
        Spline degree (non-negative).

    Returns
    -------
    KnotVector
        ``n_seg + 2 * degree + 1`` knots; the basis has ``n_seg + degree`` functions.
    """
    if not (np.isfinite(x_min) and np.isfinite(x_max)):
        raise InvalidArgumentError("domain bounds must be finite")
    if not x_min < x_max:
        raise InvalidArgumentError(f"need x_min < x_max, got {x_min} >= {x_max}")
    if int(n_seg) != n_seg or n_seg < 1:
        raise InvalidArgumentError(f"n_seg must be a positive integer, got {n_seg}")
    if int(degree) != degree or degree < 0:
        raise InvalidArgumentError(f"degree must be a non-negative integer, got {degree}")
    n_seg, degree = int(n_seg), int(degree)
    dx = (x_max - x_min) / n_seg
    interior = np.linspace(x_min, x_max, n_seg + 1)
    left = x_min - dx * np.arange(degree, 0, -1)
    right = x_max + dx * np.arange(1, degree + 1)
    knots = np.concatenate([left, interior, right])
    return KnotVector(knots=knots, degree=degree, n_seg=n_seg)


def _check_domain(x, kv):
    lo, hi = kv.x_min, kv.x_max
    slack = _DOMAIN_SLACK * (hi - lo)
    bad = (x < lo - slack) | (x > hi + slack) | ~np.isfinite(x)
    if np.any(bad):
        first = x[np.argmax(bad)]
        raise OutOfDomainError(
            f"{int(bad.sum())} point(s) outside [{lo}, {hi}], e.g. {first}; "
            "B-spline bases are not extrapolated")
    return np.clip(x, lo, hi)


def eval_basis(x, kv):
    """Evaluate every B-spline of ``kv`` at the points ``x``.

    Each row has at most ``degree + 1`` non-zeros; the right end of the
    domain belongs to the last segment.

    Raises
    ------
    OutOfDomainError
        If any point lies outside ``[kv.x_min, kv.x_max]``.
    """
    x = _check_domain(np.atleast_1d(np.asarray(x, dtype=float)), kv)
    B = BSpline.design_matrix(x, kv.knots, kv.degree, extrapolate=False).toarray()
    return BasisMatrix(values=B, knots=kv)


def diff_matrix(q, d):
    """Order-``q`` difference matrix of shape ``(d - q, d)``.

    Row ``i`` holds the alternating binomial stencil starting at column ``i``,
    e.g. ``(1, -2, 1)`` for ``q = 2``.
    """
    if int(q) != q or q < 1:
        raise InvalidArgumentError(f"difference order must be >= 1, got {q}")
    if q >= d:
        raise InvalidArgumentError(f"difference order {q} needs more than {q} coefficients, got d={d}")
    D = np.diff(np.eye(int(d)), n=int(q), axis=0)
    return DifferenceMatrix(order=int(q), dim=int(d), values=D)
