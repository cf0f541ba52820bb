"""B-spline bases and the quadratic penalty matrices used for smoothing.

The basis uses clamped knots with equally spaced interior knots. Gram and
curvature matrices are integrated exactly with Gauss-Legendre rules on each
knot span, so they do not depend on the observation grid of the data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import BSpline

from .errors import ConfigurationError, InputError, NumericalError

_DOMAIN_TOL = 1e-12
_JITTER_START = 1e-10
_JITTER_MAX = 1e-6


@dataclass(frozen=True)
class BsplineBasis:
    degree: int
    num_basis: int
    domain: tuple[float, float]
    interior_knots: np.ndarray
    knots: np.ndarray = field(repr=False)

    @property
    def boundary_knots(self) -> np.ndarray:
        a, b = self.domain
        return np.array([a] * (self.degree + 1) + [b] * (self.degree + 1))

    @property
    def breakpoints(self) -> np.ndarray:
        """Distinct knot values, i.e. the edges of the knot spans."""
        a, b = self.domain
        return np.concatenate([[a], self.interior_knots, [b]])


@dataclass(frozen=True)
class PenaltyMatrices:
    gram: np.ndarray
    curvature: np.ndarray
    composite_chol: np.ndarray
    psi: float
    ridge: float = 0.0

    @property
    def composite(self) -> np.ndarray:
        return self.gram + self.psi * self.curvature


def build_basis(degree: int = 3, num_basis: int = 10,
                domain: tuple[float, float] = (0.0, 1.0)) -> BsplineBasis:
    """Clamped B-spline basis with equally spaced interior knots."""
    degree = int(degree)
    num_basis = int(num_basis)
    if degree < 0:
        raise ConfigurationError(f"degree must be nonnegative, got {degree}")
    if num_basis < degree + 1:
        raise ConfigurationError(
            f"num_basis={num_basis} is too small for degree {degree}; "
            f"need at least {degree + 1}")
    a, b = float(domain[0]), float(domain[1])
    if not (np.isfinite(a) and np.isfinite(b)) or b <= a:
        raise ConfigurationError(f"degenerate domain [{a}, {b}]")
    n_interior = num_basis - degree - 1
    interior = np.linspace(a, b, n_interior + 2)[1:-1]
    knots = np.concatenate([np.full(degree + 1, a), interior, np.full(degree + 1, b)])
    return BsplineBasis(degree, num_basis, (a, b), interior, knots)


def _check_points(basis: BsplineBasis, points) -> np.ndarray:
    x = np.atleast_1d(np.asarray(points, dtype=float))
    a, b = basis.domain
    tol = _DOMAIN_TOL * (b - a)
    if np.any(~np.isfinite(x)) or np.any(x < a - tol) or np.any(x > b + tol):
        bad = x[(x < a - tol) | (x > b + tol) | ~np.isfinite(x)]
        raise InputError(f"points outside the basis domain [{a}, {b}]: {bad[:5]}")
    return np.clip(x, a, b)


def evaluate_basis(basis: BsplineBasis, points, derivative_order: int = 0) -> np.ndarray:
    """Matrix of basis values (or derivatives), one row per point."""
    if derivative_order < 0:
        raise ConfigurationError("derivative_order must be nonnegative")
    x = _check_points(basis, points)
    if derivative_order > basis.degree:
        return np.zeros((x.size, basis.num_basis))
    spline = BSpline(basis.knots, np.eye(basis.num_basis), basis.degree, extrapolate=False)
    vals = spline(x, nu=derivative_order)
    # scipy leaves the right endpoint of a degree-0 basis undefined
    vals = np.nan_to_num(vals, nan=0.0)
    if basis.degree == 0:
        at_end = x == basis.domain[1]
        vals[at_end, -1] = 1.0
    return vals


def _gauss_nodes(basis: BsplineBasis, order: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = leggauss(order)
    edges = basis.breakpoints
    lo, hi = edges[:-1, None], edges[1:, None]
    x = 0.5 * (hi - lo) * nodes[None, :] + 0.5 * (hi + lo)
    w = 0.5 * (hi - lo) * weights[None, :]
    return x.ravel(), w.ravel()


def gram_matrices(basis: BsplineBasis, gauss_order: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return (R, Q): integrals of basis products and of second-derivative products."""
    if gauss_order is None:
        gauss_order = basis.degree + 1
    x, w = _gauss_nodes(basis, gauss_order)
    B0 = evaluate_basis(basis, x, 0)
    B2 = evaluate_basis(basis, x, 2)
    R = (B0 * w[:, None]).T @ B0
    Q = (B2 * w[:, None]).T @ B2
    return 0.5 * (R + R.T), 0.5 * (Q + Q.T)


def jittered_cholesky(K: np.ndarray) -> tuple[np.ndarray, float]:
    """Cholesky factor of K, adding an escalating diagonal ridge on failure.

    Returns the factor and the ridge that was added (0.0 when none was needed).
    """
    K = 0.5 * (K + K.T)
    try:
        return np.linalg.cholesky(K), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = np.trace(K) / K.shape[0]
    rel = _JITTER_START
    while rel <= _JITTER_MAX * (1 + 1e-9):
        ridge = rel * scale
        try:
            return np.linalg.cholesky(K + ridge * np.eye(K.shape[0])), ridge
        except np.linalg.LinAlgError:
            rel *= 10.0
    raise NumericalError(f"Cholesky failed even with diagonal ridge {rel / 10.0 * scale:.3e}")


def eigen_factor(K: np.ndarray) -> np.ndarray:
    """Square factor V diag(sqrt(lambda)) with K = F F^T (not triangular)."""
    K = 0.5 * (K + K.T)
    evals, evecs = np.linalg.eigh(K)
    if evals.min() <= 1e-14 * max(evals.max(), 1.0):
        raise NumericalError(f"matrix is not positive definite (smallest eigenvalue {evals.min():.3e})")
    return evecs * np.sqrt(evals)


def penalty_matrices(basis: BsplineBasis, psi: float, *, gram: np.ndarray | None = None,
                     curvature: np.ndarray | None = None) -> PenaltyMatrices:
    """Gram R, curvature Q and the lower Cholesky factor of R + psi * Q."""
    psi = float(psi)
    if not np.isfinite(psi) or psi < 0:
        raise ConfigurationError(f"psi must be a nonnegative number, got {psi}")
    if gram is None or curvature is None:
        gram, curvature = gram_matrices(basis)
    L, ridge = jittered_cholesky(gram + psi * curvature)
    return PenaltyMatrices(gram, curvature, L, psi, ridge)


def linear_function_coefficients(basis: BsplineBasis, intercept: float = 0.0,
                                 slope: float = 1.0) -> np.ndarray:
    """Basis coefficients reproducing intercept + slope * s exactly (degree >= 1).

    Uses the Greville abscissae, at which the coefficients of a linear
    function in a B-spline basis are just the function values.
    """
    if basis.degree < 1:
        raise ConfigurationError("a degree-0 basis cannot represent a nonconstant line")
    k = basis.degree
    t = basis.knots
    greville = np.array([t[i + 1:i + k + 1].mean() for i in range(basis.num_basis)])
    return intercept + slope * greville
