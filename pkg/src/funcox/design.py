"""Penalized design assembly for the functional linear Cox model.

Pipeline for functional covariate k:

    raw curves Z_k(s_l)  --Riemann sum-->  scores Z*_k (n x C_k)
    scores  --(L_k^T)^{-1}-->  reparameterized block Z~_k, penalty ||gamma_k||
    block   --center + eigen-whiten-->  solver block with (1/n) B^T B = I

Scalar covariates are centered and scaled to unit mean square. Every step is
recorded so solver coefficients map back to original-scale coefficients and
coefficient functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConfigurationError, InputError, NumericalError
from .splines import BsplineBasis, eigen_factor, evaluate_basis, gram_matrices, jittered_cholesky

RANK_TOL = 1e-10


@dataclass
class SurvivalDataset:
    """Survival outcome plus scalar and functional covariates on a shared grid."""

    y: np.ndarray
    delta: np.ndarray
    scalar: np.ndarray
    functional: list[np.ndarray]
    grid: np.ndarray
    scalar_names: list[str] = field(default_factory=list)
    functional_names: list[str] = field(default_factory=list)
    subject_ids: list[str] | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.delta = np.asarray(self.delta).astype(np.int64)
        n = self.y.size
        self.scalar = np.asarray(self.scalar, dtype=float).reshape(n, -1)
        self.functional = [np.asarray(f, dtype=float) for f in self.functional]
        self.grid = np.asarray(self.grid, dtype=float)
        if not self.scalar_names:
            self.scalar_names = [f"x{j + 1}" for j in range(self.scalar.shape[1])]
        if not self.functional_names:
            self.functional_names = [f"f{k + 1}" for k in range(len(self.functional))]
        self.validate()

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.scalar.shape[1]

    @property
    def k(self) -> int:
        return len(self.functional)

    @property
    def m(self) -> int:
        return self.grid.size

    def validate(self) -> None:
        n = self.n
        if self.delta.shape != (n,):
            raise InputError("event vector length differs from time vector")
        if np.any(~np.isfinite(self.y)) or np.any(self.y <= 0):
            raise InputError("observed times must be finite and strictly positive")
        if not np.all((self.delta == 0) | (self.delta == 1)):
            raise InputError("event indicators must be 0 or 1")
        if np.any(~np.isfinite(self.scalar)):
            raise InputError("scalar covariates contain missing or infinite values")
        if len(self.scalar_names) != self.p:
            raise InputError("scalar_names length differs from scalar column count")
        if len(self.functional_names) != self.k:
            raise InputError("functional_names length differs from functional block count")
        if self.grid.ndim != 1 or np.any(np.diff(self.grid) <= 0):
            raise InputError("grid must be strictly increasing")
        for name, block in zip(self.functional_names, self.functional):
            if block.shape != (n, self.m):
                raise InputError(f"functional covariate {name!r} has shape {block.shape}, "
                                 f"expected ({n}, {self.m})")
            if np.any(~np.isfinite(block)):
                raise InputError(f"functional covariate {name!r} contains missing values")

    def subset(self, rows) -> "SurvivalDataset":
        rows = np.asarray(rows)
        ids = None if self.subject_ids is None else [self.subject_ids[i] for i in rows]
        return SurvivalDataset(self.y[rows], self.delta[rows], self.scalar[rows],
                               [f[rows] for f in self.functional], self.grid,
                               list(self.scalar_names), list(self.functional_names), ids)


@dataclass
class PenalizedDesign:
    """Solver-ready design with the records needed to undo every transformation.

    ``X`` holds the standardized scalar columns followed by the orthonormalized
    group blocks. ``block_start``/``block_size`` describe penalty blocks in that
    order: one size-1 block per scalar, then one block per functional group
    (size equals the retained rank, possibly 0).
    """

    X: np.ndarray
    p: int
    block_start: np.ndarray
    block_size: np.ndarray
    scalar_mean: np.ndarray
    scalar_scale: np.ndarray
    score_mean: list[np.ndarray]
    ortho_maps: list[np.ndarray]
    chol_factors: list[np.ndarray]
    ranks: np.ndarray
    psi: float = 0.0
    warnings: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def k(self) -> int:
        return len(self.ortho_maps)

    @property
    def n_columns(self) -> int:
        return self.X.shape[1]

    @property
    def scalar_block(self) -> np.ndarray:
        return self.X[:, :self.p]

    @property
    def group_blocks(self) -> list[np.ndarray]:
        out = []
        for g in range(self.k):
            s, z = self.block_start[self.p + g], self.block_size[self.p + g]
            out.append(self.X[:, s:s + z])
        return out

    @property
    def group_index(self) -> np.ndarray:
        """Column -> block label: -1 for scalar columns, group number otherwise."""
        idx = np.full(self.n_columns, -1, dtype=np.int64)
        for g in range(self.k):
            s, z = self.block_start[self.p + g], self.block_size[self.p + g]
            idx[s:s + z] = g
        return idx

    def group_slice(self, g: int) -> slice:
        s, z = self.block_start[self.p + g], self.block_size[self.p + g]
        return slice(int(s), int(s + z))


def riemann_factor(basis: BsplineBasis, m: int) -> float:
    """Quadrature weight of the score sum: domain length over grid size."""
    a, b = basis.domain
    return (b - a) / m


def functional_scores(dataset: SurvivalDataset, bases: list[BsplineBasis]) -> list[np.ndarray]:
    """Riemann-sum scores (range/m) * sum_l Z_k(s_l) theta_c(s_l), one n x C_k block per covariate."""
    if len(bases) != dataset.k:
        raise InputError(f"{len(bases)} bases supplied for {dataset.k} functional covariates")
    out = []
    for block, basis in zip(dataset.functional, bases):
        theta = evaluate_basis(basis, dataset.grid, 0)
        out.append(riemann_factor(basis, dataset.m) * (block @ theta))
    return out


def _is_lower(chol: np.ndarray) -> bool:
    return not np.any(np.triu(chol, 1))


def reparameterize(scores: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Return scores @ inv(chol^T), so that gamma = chol^T b carries the penalty.

    ``chol`` is any square factor with K = chol @ chol.T; lower-triangular
    factors use a triangular solve.
    """
    chol = np.asarray(chol, dtype=float)
    scores = np.asarray(scores, dtype=float)
    if _is_lower(chol):
        d = np.abs(np.diag(chol))
        if np.any(d == 0) or np.any(~np.isfinite(d)) or d.min() < 1e-300 * max(d.max(), 1.0):
            raise NumericalError("Cholesky factor is singular")
        return solve_triangular(chol, scores.T, lower=True).T
    try:
        return np.linalg.solve(chol, scores.T).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError("penalty factor is singular") from exc


def gamma_from_b(b: np.ndarray, chol: np.ndarray) -> np.ndarray:
    return chol.T @ b


def b_from_gamma(gamma: np.ndarray, chol: np.ndarray) -> np.ndarray:
    if _is_lower(chol):
        return solve_triangular(chol.T, gamma, lower=False)
    return np.linalg.solve(chol.T, gamma)


def _whitening_map(block: np.ndarray, scale: float) -> np.ndarray:
    """Map T with (1/n) (block T)^T (block T) = I on the retained directions.

    Uses the SVD of the centered block, so orthonormality holds to rounding
    even when the group Gram matrix is badly conditioned. Directions whose
    Gram eigenvalue falls below RANK_TOL times the largest are dropped; a
    block that is zero up to rounding of ``scale`` has rank 0.
    """
    n = block.shape[0]
    _, sv, vt = np.linalg.svd(block, full_matrices=False)
    evals = sv ** 2 / n
    top = evals.max() if evals.size else 0.0
    if top <= (1e3 * np.finfo(float).eps * max(scale, 1e-300)) ** 2:
        return np.zeros((block.shape[1], 0))
    keep = evals >= RANK_TOL * top
    evecs = vt[keep].T
    # fix eigenvector signs so the map is reproducible across LAPACK builds
    signs = np.sign(evecs[np.argmax(np.abs(evecs), axis=0), np.arange(evecs.shape[1])])
    signs[signs == 0] = 1.0
    return evecs * signs / np.sqrt(evals[keep])


def standardize_and_orthonormalize(scalar: np.ndarray, groups: list[np.ndarray],
                                   chol_factors: list[np.ndarray] | None = None,
                                   psi: float = 0.0) -> PenalizedDesign:
    scalar = np.asarray(scalar, dtype=float)
    n = scalar.shape[0]
    p = scalar.shape[1]
    max_c = max([g.shape[1] for g in groups], default=0)
    if n <= max(p, max_c):
        raise InputError(f"need more subjects ({n}) than scalar covariates ({p}) "
                         f"and basis functions per group ({max_c})")
    mean = scalar.mean(axis=0)
    centered = scalar - mean
    scale = np.sqrt((centered ** 2).mean(axis=0))
    const = np.flatnonzero(scale <= 1e-12 * np.maximum(1.0, np.abs(mean)))
    if const.size:
        raise InputError(f"constant scalar covariate column(s): {const.tolist()}")
    cols = [centered / scale]
    starts = list(range(p))
    sizes = [1] * p
    score_mean, maps, ranks, warnings = [], [], [], []
    pos = p
    for g, block in enumerate(groups):
        block = np.asarray(block, dtype=float)
        if block.shape[0] != n:
            raise InputError(f"group {g} has {block.shape[0]} rows, expected {n}")
        mu = block.mean(axis=0)
        T = _whitening_map(block - mu, float(np.abs(block).max(initial=0.0)))
        r = T.shape[1]
        if r == 0:
            warnings.append(f"group {g} has rank 0 and was dropped")
        elif r < block.shape[1]:
            warnings.append(f"group {g} reduced to rank {r} of {block.shape[1]}")
        cols.append((block - mu) @ T)
        score_mean.append(mu)
        maps.append(T)
        ranks.append(r)
        starts.append(pos)
        sizes.append(r)
        pos += r
    X = np.ascontiguousarray(np.hstack(cols))
    if chol_factors is None:
        chol_factors = [np.eye(gb.shape[1]) for gb in groups]
    return PenalizedDesign(X, p, np.asarray(starts, dtype=np.int64),
                           np.asarray(sizes, dtype=np.int64), mean, scale, score_mean,
                           maps, list(chol_factors), np.asarray(ranks, dtype=np.int64),
                           float(psi), warnings)


class DesignBuilder:
    """Builds penalized designs for one dataset at any smoothing level.

    Scores and the per-basis Gram/curvature matrices are computed once; each
    call only refactorizes and re-whitens. ``r_weights``/``q_weights`` give the
    adaptive combination w_k R_k + psi v_k Q_k (default all ones).
    ``factorization`` picks the penalty square root: "cholesky" (lower
    triangular, the default) or "eigen" (V diag(sqrt(lambda))).
    """

    FACTORIZATIONS = ("cholesky", "eigen")

    def __init__(self, dataset: SurvivalDataset, bases: list[BsplineBasis] | None = None,
                 *, degree: int = 3, num_basis: int = 10, factorization: str = "cholesky"):
        from .splines import build_basis
        if factorization not in self.FACTORIZATIONS:
            raise ConfigurationError(f"unknown factorization {factorization!r}")
        self.factorization = factorization
        self.dataset = dataset
        if bases is None:
            domain = (float(dataset.grid[0]), float(dataset.grid[-1]))
            bases = [build_basis(degree, num_basis, domain) for _ in range(dataset.k)]
        self.bases = list(bases)
        self.scores = functional_scores(dataset, self.bases)
        self._mats = [gram_matrices(b) for b in self.bases]

    def penalty(self, g: int, psi: float, r_weight: float = 1.0, q_weight: float = 1.0) -> np.ndarray:
        R, Q = self._mats[g]
        return r_weight * R + psi * q_weight * Q

    def chol(self, g: int, psi: float, r_weight: float = 1.0, q_weight: float = 1.0) -> np.ndarray:
        K = self.penalty(g, psi, r_weight, q_weight)
        if self.factorization == "eigen":
            return eigen_factor(K)
        return jittered_cholesky(K)[0]

    def build(self, psi: float, r_weights=None, q_weights=None) -> PenalizedDesign:
        psi = float(psi)
        if not np.isfinite(psi) or psi < 0:
            raise ConfigurationError(f"psi must be a nonnegative number, got {psi}")
        k = self.dataset.k
        rw = np.ones(k) if r_weights is None else np.asarray(r_weights, dtype=float)
        qw = np.ones(k) if q_weights is None else np.asarray(q_weights, dtype=float)
        chols = [self.chol(g, psi, rw[g], qw[g]) for g in range(k)]
        blocks = [reparameterize(s, L) for s, L in zip(self.scores, chols)]
        return standardize_and_orthonormalize(self.dataset.scalar, blocks, chols, psi)


@dataclass
class Coefficients:
    """Original-scale coefficients recovered from a solver solution."""

    beta: np.ndarray
    b: list[np.ndarray]
    gamma: list[np.ndarray]
    offset: float
    grid: np.ndarray | None = None
    functions: np.ndarray | None = None


def backtransform(theta, design: PenalizedDesign, bases: list[BsplineBasis] | None = None,
                  eval_grid=None) -> Coefficients:
    """Map solver coefficients to scalar betas, basis coefficients and curves.

    ``offset`` is the constant separating the two linear predictors:
    eta_original = eta_solver + offset (Cox likelihoods ignore it).
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (design.n_columns,):
        raise InputError(f"coefficient vector has shape {theta.shape}, "
                         f"expected ({design.n_columns},)")
    beta = theta[:design.p] / design.scalar_scale
    offset = float(design.scalar_mean @ beta)
    bs, gammas = [], []
    for g in range(design.k):
        gamma_ortho = theta[design.group_slice(g)]
        gamma = design.ortho_maps[g] @ gamma_ortho
        b = b_from_gamma(gamma, design.chol_factors[g])
        offset += float(design.score_mean[g] @ gamma)
        gammas.append(gamma)
        bs.append(b)
    out = Coefficients(beta, bs, gammas, offset)
    if eval_grid is not None:
        if bases is None or len(bases) != design.k:
            raise InputError("one basis per functional group is needed to evaluate curves")
        grid = np.asarray(eval_grid, dtype=float)
        out.grid = grid
        out.functions = np.array([evaluate_basis(bs_, grid, 0) @ b for bs_, b in zip(bases, bs)]
                                 ).reshape(design.k, grid.size)
    return out


def original_linear_predictor(dataset: SurvivalDataset, coefs: Coefficients,
                              scores: list[np.ndarray]) -> np.ndarray:
    eta = dataset.scalar @ coefs.beta
    for s, b in zip(scores, coefs.b):
        eta = eta + s @ b
    return eta
