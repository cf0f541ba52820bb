"""EBIC scoring, the (lambda, psi) grid search and adaptive penalty weights."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import gammaln

from .coxcore import RiskStructure, build_risk_structure
from .design import DesignBuilder, PenalizedDesign, backtransform
from .errors import ConfigurationError, InputError, NumericalError
from .solver import FitResult, PenaltyConfig, fit, fit_path, path_lambda_max
from .splines import BsplineBasis, PenaltyMatrices, evaluate_basis, gram_matrices, penalty_matrices

log = logging.getLogger(__name__)

WEIGHT_CAP = 1e6
DEFAULT_N_LAMBDA = 50
DEFAULT_LAMBDA_RATIO = 1e-3
DEFAULT_PSI_GRID = tuple(np.logspace(-3, 3, 7))
_TIE_RTOL = 1e-9


def log_binomial(n: int, k: int) -> float:
    if k < 0 or k > n:
        raise ValueError(f"log C({n}, {k}) is undefined")
    return float(gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1))


def degrees_of_freedom(result: FitResult, ranks) -> int:
    """Selected scalars plus the ranks of the selected groups."""
    ranks = np.asarray(ranks, dtype=np.int64)
    return int(result.selected_scalars.size + ranks[result.selected_groups].sum())


def information_criteria(result: FitResult, rs: RiskStructure, p_total: int, ranks,
                         sample_size: str = "events") -> tuple[int, float, float]:
    """Return (df, BIC, EBIC) for a fitted model.

    ``sample_size`` chooses the log factor of BIC: the number of events
    (default) or the number of subjects ("n").
    """
    nu = result.model_size
    if nu > p_total:
        raise ConfigurationError(f"{nu} selected variables exceed p_total={p_total}")
    if sample_size == "events":
        eff = rs.n_events
    elif sample_size == "n":
        eff = rs.n
    else:
        raise ConfigurationError(f"unknown BIC sample size {sample_size!r}")
    df = degrees_of_freedom(result, ranks)
    bic = -2.0 * result.final_loglik + df * np.log(eff)
    return df, float(bic), float(bic + 2.0 * log_binomial(p_total, nu))


def ebic(result: FitResult, rs: RiskStructure, p_total: int, ranks=None,
         sample_size: str = "events") -> float:
    """Extended BIC; ``ranks`` defaults to one degree of freedom per group."""
    if ranks is None:
        ranks = np.ones(max(p_total - result.p, 0), dtype=np.int64)
    return information_criteria(result, rs, p_total, ranks, sample_size)[2]


@dataclass
class CellRecord:
    lam: float
    psi: float
    fit: FitResult | None = field(default=None, repr=False)
    error: str | None = None
    df: int = 0
    model_size: int = 0
    loglik: float = np.nan
    bic: float = np.nan
    ebic: float = np.nan
    converged: bool = False

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class EbicSurface:
    """EBIC over the grid. ``lambdas[j]`` is the lambda path used for ``psi_grid[j]``."""

    lambdas: np.ndarray
    psi_grid: np.ndarray
    cells: list[list[CellRecord]] = field(repr=False)
    optimum: tuple[int, int] | None
    designs: list[PenalizedDesign] = field(repr=False, default_factory=list)
    spot_checks: list[dict] = field(default_factory=list)

    @property
    def best(self) -> CellRecord:
        if self.optimum is None:
            raise NumericalError("every cell of the grid search failed")
        j, i = self.optimum
        return self.cells[j][i]

    @property
    def best_design(self) -> PenalizedDesign:
        return self.designs[self.optimum[0]]

    def ebic_matrix(self) -> np.ndarray:
        """EBIC values, shape (n_psi, n_lambda), NaN for failed cells."""
        return np.array([[c.ebic for c in col] for col in self.cells])

    def rows(self) -> list[dict]:
        out = []
        for j, col in enumerate(self.cells):
            for i, c in enumerate(col):
                out.append({"psi_index": j, "lambda_index": i, "psi": c.psi, "lambda": c.lam,
                            "converged": c.converged, "model_size": c.model_size, "df": c.df,
                            "loglik": c.loglik, "bic": c.bic, "ebic": c.ebic,
                            "optimum": (j, i) == self.optimum, "error": c.error or ""})
        return out


def lambda_grid(lam_max: float, n_lambda: int = DEFAULT_N_LAMBDA,
                ratio: float = DEFAULT_LAMBDA_RATIO) -> np.ndarray:
    if not np.isfinite(lam_max) or lam_max <= 0:
        raise ConfigurationError(f"cannot build a lambda grid from lambda_max={lam_max}")
    if n_lambda < 1 or not 0 < ratio <= 1:
        raise ConfigurationError("need n_lambda >= 1 and 0 < ratio <= 1")
    return lam_max * np.logspace(0.0, np.log10(ratio), n_lambda)


def _pick_optimum(cells: list[list[CellRecord]]) -> tuple[int, int] | None:
    cand = [(j, i, c) for j, col in enumerate(cells) for i, c in enumerate(col)
            if c.ok and np.isfinite(c.ebic)]
    if not cand:
        return None
    lo = min(c.ebic for _, _, c in cand)
    tol = _TIE_RTOL * max(1.0, abs(lo))
    tied = [(j, i, c) for j, i, c in cand if c.ebic <= lo + tol]
    # sparser then smoother: larger lambda first, then larger psi
    j, i, _ = max(tied, key=lambda t: (t[2].lam, t[2].psi, -t[0], -t[1]))
    return j, i


def _rotate_solution(theta: np.ndarray, src: PenalizedDesign, dst: PenalizedDesign):
    """Express a solution of ``src`` in the columns of ``dst`` when the two
    designs span the same group column spaces (ranks equal and full)."""
    if not np.array_equal(src.block_size, dst.block_size):
        return None
    out = theta.copy()
    for g in range(dst.k):
        a, b = src.group_slice(g), dst.group_slice(g)
        if b.stop == b.start:
            continue
        proj = dst.X[:, b].T @ src.X[:, a] / dst.n
        rot = proj @ theta[a]
        # a genuine rotation preserves the norm; anything else means the spans differ
        if not np.isclose(np.linalg.norm(rot), np.linalg.norm(theta[a]), rtol=1e-8, atol=1e-12):
            return None
        out[b] = rot
    return out


def _score(result: FitResult, design: PenalizedDesign, rs: RiskStructure, psi: float,
           p_total: int, sample_size: str) -> CellRecord:
    df, bic, eb = information_criteria(result, rs, p_total, design.ranks, sample_size)
    return CellRecord(result.lam, psi, result, None, df, result.model_size, result.final_loglik,
                      bic, eb, result.converged)


def grid_search(builder: DesignBuilder, lambda_grid_values=None, psi_grid=DEFAULT_PSI_GRID,
                penalty: PenaltyConfig | None = None, *, n_lambda: int = DEFAULT_N_LAMBDA,
                lambda_ratio: float = DEFAULT_LAMBDA_RATIO, r_weights=None, q_weights=None,
                sample_size: str = "events", spot_checks: int = 0, seed: int = 0,
                rs: RiskStructure | None = None, keep_fits: bool = True) -> EbicSurface:
    """Fit the lambda path for every psi and locate the EBIC optimum.

    With ``lambda_grid_values=None`` each psi column gets its own grid from
    its lambda_max. Numerical failures are stored in their cells. Columns
    after the first are warm-started from the previous column's solution at
    the same lambda index when the designs span the same spaces, which is
    the usual case and makes extra psi values cheap.
    """
    penalty = PenaltyConfig() if penalty is None else penalty
    psi_grid = np.atleast_1d(np.asarray(psi_grid, dtype=float))
    if psi_grid.size == 0:
        raise ConfigurationError("psi grid is empty")
    if np.any(~np.isfinite(psi_grid)) or np.any(psi_grid < 0):
        raise ConfigurationError("psi values must be nonnegative numbers")
    fixed = None
    if lambda_grid_values is not None:
        fixed = np.atleast_1d(np.asarray(lambda_grid_values, dtype=float))
        if fixed.size == 0 or np.any(~np.isfinite(fixed)) or np.any(fixed < 0):
            raise ConfigurationError("lambda grid must be nonempty and nonnegative")
        fixed = np.sort(fixed)[::-1]
    ds = builder.dataset
    rs = build_risk_structure(ds.y, ds.delta) if rs is None else rs
    p_total = ds.p + ds.k
    lambdas, cells, designs = [], [], []
    prev_design, prev_col = None, None
    for psi in psi_grid:
        design = builder.build(psi, r_weights, q_weights)
        if fixed is None:
            lm = path_lambda_max(design, rs, penalty)
            lams = lambda_grid(lm, n_lambda, lambda_ratio)
        else:
            lams = fixed
        col = _fit_column(design, rs, lams, penalty, prev_design, prev_col)
        cells.append([_score(r, design, rs, psi, p_total, sample_size)
                      if isinstance(r, FitResult) else CellRecord(lam, psi, error=str(r))
                      for lam, r in zip(lams, col)])
        lambdas.append(lams)
        designs.append(design)
        prev_design, prev_col = design, col
    surface = EbicSurface(np.array(lambdas), psi_grid, cells, _pick_optimum(cells), designs)
    if spot_checks:
        surface.spot_checks = _spot_check(surface, rs, penalty, spot_checks, seed)
    if not keep_fits:
        for j, col in enumerate(surface.cells):
            for i, c in enumerate(col):
                if (j, i) != surface.optimum:
                    c.fit = None
    return surface


def _fit_column(design, rs, lams, penalty, prev_design, prev_col):
    if prev_col is None or len(prev_col) != len(lams):
        return fit_path(design, rs, lams, penalty)
    out = []
    warm = None
    for lam, prev in zip(lams, prev_col):
        init = warm
        if isinstance(prev, FitResult) and np.isclose(prev.lam, lam, rtol=1e-10, atol=0):
            rotated = _rotate_solution(prev.theta, prev_design, design)
            if rotated is not None:
                init = rotated
        try:
            res = fit(design, rs, penalty.with_lambda(lam), init)
        except NumericalError as exc:
            out.append(exc)
            # less penalized cells would diverge as well
            out.extend(NumericalError(f"not attempted at lambda={x:.6g}: path failed at "
                                      f"lambda={lam:.6g}") for x in lams[len(out):])
            break
        out.append(res)
        warm = res.theta
    return out


def _spot_check(surface: EbicSurface, rs, penalty, count, seed) -> list[dict]:
    """Refit a few random cells from zero and compare with the stored warm fits."""
    ok = [(j, i) for j, col in enumerate(surface.cells) for i, c in enumerate(col) if c.ok]
    if not ok:
        return []
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(ok), size=min(count, len(ok)), replace=False)
    out = []
    for k in sorted(picks):
        j, i = ok[k]
        cell = surface.cells[j][i]
        design = surface.designs[j]
        rec = {"psi_index": j, "lambda_index": i}
        try:
            cold = fit(design, rs, penalty.with_lambda(cell.lam))
        except NumericalError as exc:
            rec.update(max_abs_diff=np.nan, error=str(exc))
        else:
            # compare linear predictors: coefficients within a group are only
            # determined up to the group's orthonormal basis
            d = np.max(np.abs(design.X @ (cold.theta - cell.fit.theta)))
            rec.update(max_abs_diff=float(d), error="")
        out.append(rec)
    return out


# adaptive weights -----------------------------------------------------------

def _trapezoid_norm(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    return np.sqrt(trapezoid(values ** 2, grid, axis=-1))


def adaptive_weights(functions, second_derivatives, grid, cap: float = WEIGHT_CAP
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Weights w_k = 1/||f_k|| and v_k = 1/||f_k''|| from initial estimates.

    Norms use the trapezoid rule on ``grid``. Zero norms get the cap, and each
    weight vector is rescaled so that its smallest entry is 1.
    """
    f = np.atleast_2d(np.asarray(functions, dtype=float))
    f2 = np.atleast_2d(np.asarray(second_derivatives, dtype=float))
    grid = np.asarray(grid, dtype=float)
    if f.shape != f2.shape or f.shape[1] != grid.size:
        raise InputError("initial functions, derivatives and grid do not match")
    nf = _trapezoid_norm(f, grid)
    nd = _trapezoid_norm(f2, grid)
    if not np.any(nf > 0):
        raise NumericalError("every initial coefficient function is zero; no signal to adapt to")

    def invert(norms):
        w = np.full(norms.shape, cap)
        pos = norms > 0
        w[pos] = np.minimum(1.0 / norms[pos], cap)
        return w / w.min()

    return invert(nf), invert(nd)


def adaptive_penalty_matrices(basis: BsplineBasis, psi: float, w: float, v: float,
                              *, gram=None, curvature=None) -> PenaltyMatrices:
    """Cholesky factor of w R + psi v Q."""
    if not (np.isfinite(w) and np.isfinite(v)) or w <= 0 or v < 0:
        raise ConfigurationError("adaptive weights must be finite with w > 0 and v >= 0")
    if gram is None or curvature is None:
        gram, curvature = gram_matrices(basis)
    pm = penalty_matrices(basis, psi * v, gram=w * gram, curvature=curvature)
    return PenaltyMatrices(gram, curvature, pm.composite_chol, float(psi), pm.ridge)


ADAPTIVE_MODES = ("lambda", "absorbed")


def initial_curves(surface: EbicSurface, builder: DesignBuilder, grid) -> tuple[np.ndarray, np.ndarray]:
    """Curves and second derivatives of the EBIC-optimal fit on ``grid``."""
    coefs = backtransform(surface.best.fit.theta, surface.best_design)
    f = np.array([evaluate_basis(bs, grid, 0) @ b for bs, b in zip(builder.bases, coefs.b)])
    f2 = np.array([evaluate_basis(bs, grid, 2) @ b for bs, b in zip(builder.bases, coefs.b)])
    return f.reshape(len(coefs.b), -1), f2.reshape(len(coefs.b), -1)


def adaptive_configuration(w: np.ndarray, v: np.ndarray, mode: str = "lambda"
                           ) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Translate adaptive weights into (group_weights, r_weights, q_weights).

    "absorbed" puts w R + psi v Q into the reparameterization and keeps unit
    group weights. "lambda" factors the same quadratic form as
    w (R + psi (v / w) Q): sqrt(w) scales the group's lambda and v / w stays
    in the reparameterization.
    """
    w = np.asarray(w, dtype=float)
    v = np.asarray(v, dtype=float)
    if mode == "absorbed":
        return None, w, v
    if mode == "lambda":
        return np.sqrt(w), np.ones_like(w), v / w
    raise ConfigurationError(f"unknown adaptive mode {mode!r}; expected one of {ADAPTIVE_MODES}")


def adaptive_grid_search(builder: DesignBuilder, initial: EbicSurface, psi_grid=DEFAULT_PSI_GRID,
                         penalty: PenaltyConfig | None = None, *, mode: str = "lambda",
                         eval_points: int = 201, **kwargs) -> tuple[EbicSurface, np.ndarray, np.ndarray]:
    """Second-stage search with weights from an initial (non-adaptive) optimum."""
    penalty = PenaltyConfig() if penalty is None else penalty
    a, b = builder.bases[0].domain
    grid = np.linspace(a, b, eval_points)
    f, f2 = initial_curves(initial, builder, grid)
    w, v = adaptive_weights(f, f2, grid)
    gw, rw, qw = adaptive_configuration(w, v, mode)
    pen = replace(penalty, group_weights=gw)
    surface = grid_search(builder, None, psi_grid, pen, r_weights=rw, q_weights=qw, **kwargs)
    return surface, w, v
