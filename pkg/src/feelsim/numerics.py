"""Scalar and linear-algebra primitives used by the radio and scheduling layers.

Provides the principal-branch Lambert W function, a golden-section scalar
minimizer, and the dominant generalized eigenvector used for receive
beamforming.  All routines are deterministic and allocation-light; they sit
on the hot path of the per-round resource optimization.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

# Complex vectors are plain 1-D numpy arrays of dtype complex128.
ComplexVector = np.ndarray

# Interior probe ratio for golden-section search: (3 - sqrt(5)) / 2.
GOLDEN_SHRINK = (3.0 - math.sqrt(5.0)) / 2.0

_BRANCH_POINT = -math.exp(-1.0)  # -1/e, left edge of the W0 domain


class SingularMatrixError(ValueError):
    """Raised when a beamforming covariance cannot be inverted."""


@dataclass(frozen=True)
class Interval:
    """Closed interval [lo, hi] with lo <= hi, both finite."""

    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ValueError(f"interval bounds must be finite, got [{self.lo}, {self.hi}]")
        if self.lo > self.hi:
            raise ValueError(f"interval requires lo <= hi, got [{self.lo}, {self.hi}]")

    @property
    def width(self) -> float:
        return self.hi - self.lo


def unit_norm(v: ComplexVector) -> ComplexVector:
    """Return v scaled to unit Euclidean norm."""
    v = np.asarray(v, dtype=np.complex128)
    n = np.linalg.norm(v)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalize a zero or non-finite vector")
    return v / n


def lambert_w0(x: float) -> float:
    """Principal branch W0 of w * exp(w) = x, for x >= -1/e.

    Uses a branch-point series / log-asymptotic initial guess followed by
    Halley iteration.  Converges to residual |w e^w - x| <= 1e-12 * max(1, |x|)
    in a handful of steps over the whole domain.
    """
    x = float(x)
    if math.isnan(x):
        raise ValueError("lambert_w0 is undefined for NaN")
    if x < _BRANCH_POINT:
        # allow only representation-level slop below the branch point
        if x < _BRANCH_POINT * (1.0 + 1e-12) - 1e-300:
            raise ValueError(f"lambert_w0 requires x >= -1/e, got {x}")
        x = _BRANCH_POINT
    if x == 0.0:
        return 0.0

    if x < -0.25:
        # series around the branch point in p = sqrt(2 (e x + 1))
        p = math.sqrt(max(2.0 * (math.e * x + 1.0), 0.0))
        w = -1.0 + p * (1.0 - p * (1.0 / 3.0 - 11.0 / 72.0 * p))
    elif x < math.e:
        w = x / (1.0 + x)  # decent near 0, corrected by Halley below
    else:
        lx = math.log(x)
        w = lx - math.log(lx)

    for _ in range(64):
        ew = math.exp(w)
        f = w * ew - x
        if abs(f) <= 1e-13 * max(1.0, abs(x)):
            break
        wp1 = w + 1.0
        # Halley step; second-order correction keeps the branch-point case stable
        denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1)
        step = f / denom
        w -= step
        if abs(step) <= 1e-16 * max(1.0, abs(w)):
            break
    return w


def golden_section_min(
    f,
    bounds: Interval,
    tol: float = 1e-6,
    max_iter: int = 1000,
    check_unimodal: bool = False,
) -> tuple[float, float]:
    """Minimize a scalar function over a closed interval by golden-section search.

    Keeps one previous probe per iteration: with r = GOLDEN_SHRINK the probes
    are x1 = lo + r (hi - lo) and x2 = lo + (1 - r)(hi - lo); f(x1) < f(x2)
    shrinks the right side, otherwise the left.  Stops when the bracket is
    narrower than tol or after max_iter shrinks, and returns the better of the
    two final probes as (argmin, fmin).

    The objective may return +inf to mark infeasible points; the bracket then
    contracts away from the infeasible side as long as the feasible region is
    an interval.  With check_unimodal=True a 1000-point pre-scan runs first,
    and if it sees more than one local minimum the routine warns and returns
    the scan's argmin instead.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    lo, hi = bounds.lo, bounds.hi
    if hi - lo <= 0.0:
        return lo, f(lo)

    if check_unimodal:
        xs = np.linspace(lo, hi, 1000)
        ys = np.array([f(x) for x in xs])
        finite = np.isfinite(ys)
        interior = ys[1:-1]
        is_min = (interior < ys[:-2]) & (interior <= ys[2:]) & finite[1:-1]
        if int(is_min.sum()) > 1:
            warnings.warn(
                "objective is not unimodal on the bracket; returning grid argmin",
                RuntimeWarning,
                stacklevel=2,
            )
            k = int(np.nanargmin(np.where(finite, ys, np.inf)))
            return float(xs[k]), float(ys[k])

    r = GOLDEN_SHRINK
    x1 = lo + r * (hi - lo)
    x2 = lo + (1.0 - r) * (hi - lo)
    f1 = f(x1)
    f2 = f(x2)
    it = 0
    while (hi - lo) > tol and it < max_iter:
        it += 1
        if f1 < f2:
            # minimum cannot sit right of x2
            hi = x2
            x2, f2 = x1, f1
            x1 = lo + r * (hi - lo)
            f1 = f(x1)
        else:
            lo = x1
            x1, f1 = x2, f2
            x2 = lo + (1.0 - r) * (hi - lo)
            f2 = f(x2)
    return (x1, f1) if f1 < f2 else (x2, f2)


def max_generalized_eigvec(a: ComplexVector, m: np.ndarray) -> ComplexVector:
    """Unit vector w maximizing |a^H w|^2 / (w^H M w) for Hermitian PD M.

    The maximizer is M^{-1} a up to scale, so a single linear solve suffices.
    Raises SingularMatrixError when M is numerically singular.
    """
    a = np.asarray(a, dtype=np.complex128)
    m = np.asarray(m, dtype=np.complex128)
    if a.ndim != 1 or m.shape != (a.size, a.size):
        raise ValueError(f"shape mismatch: a has {a.shape}, M has {m.shape}")
    try:
        v = np.linalg.solve(m, a)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"covariance solve failed: {exc}") from exc
    if not np.all(np.isfinite(v)):
        raise SingularMatrixError("covariance solve produced non-finite entries")
    return unit_norm(v)


def rayleigh_quotient(a: ComplexVector, m: np.ndarray, w: ComplexVector) -> float:
    """|a^H w|^2 / (w^H M w), the gain achieved by combiner w."""
    num = abs(np.vdot(a, w)) ** 2
    den = float(np.real(np.vdot(w, m @ w)))
    return num / den
