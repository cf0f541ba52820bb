"""Simulated functional Cox data, Monte Carlo studies and selection metrics."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre

from .design import DesignBuilder, SurvivalDataset, backtransform
from .errors import ConfigurationError, FuncoxError

log = logging.getLogger(__name__)


def true_functions(s) -> np.ndarray:
    """The five nonzero coefficient curves of the simulation design, shape (5, len(s))."""
    s = np.asarray(s, dtype=float)
    return np.vstack([
        3.0 * np.cos(np.pi * s),
        4.5 * np.sin(np.pi * s),
        3.5 * np.cos(2 * np.pi * s) - 5.5 * np.sin(2 * np.pi * s),
        4.0 * np.cos(2 * np.pi * s),
        2.5 * np.sin(2 * np.pi * s),
    ])


def legendre_basis(s, count: int) -> np.ndarray:
    """Shifted Legendre polynomials on [0, 1] with unit L2 norm, shape (count, len(s))."""
    x = 2.0 * np.asarray(s, dtype=float) - 1.0
    out = np.empty((count, x.size))
    for q in range(count):
        coef = np.zeros(q + 1)
        coef[q] = 1.0
        out[q] = np.sqrt(2 * q + 1) * legendre.legval(x, coef)
    return out


@dataclass
class SimConfig:
    n: int = 200
    p_scalar: int = 15
    k_functional: int = 20
    n_grid: int = 101
    scalar_betas: tuple = (1.0, 1.5, 2.0)
    n_score_components: int = 20
    score_variance_slope: float = 4.0
    baseline_log_hazard: float = 0.5
    mean_censoring: float = 10.0
    n_replicates: int = 200
    seed: int = 2024

    def __post_init__(self):
        if self.n < 2 or self.n_grid < 2:
            raise ConfigurationError("need at least two subjects and two grid points")
        if self.p_scalar < len(self.scalar_betas) or self.k_functional < 5:
            raise ConfigurationError("too few covariates for the true model")
        if self.mean_censoring <= 0 or self.n_replicates < 1:
            raise ConfigurationError("mean censoring time and replicate count must be positive")

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_grid)

    @property
    def true_beta(self) -> np.ndarray:
        b = np.zeros(self.p_scalar)
        b[:len(self.scalar_betas)] = self.scalar_betas
        return b

    def true_curves(self, s=None) -> np.ndarray:
        s = self.grid if s is None else np.asarray(s)
        out = np.zeros((self.k_functional, s.size))
        out[:5] = true_functions(s)
        return out

    @property
    def true_scalar_set(self) -> np.ndarray:
        return np.flatnonzero(self.true_beta != 0)

    @property
    def true_group_set(self) -> np.ndarray:
        return np.arange(5)


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """Independent stream per replicate, derived from the master seed by counter."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed),
                                                        spawn_key=(int(replicate),)))


def generate_dataset(config: SimConfig, replicate: int = 0, *, rng=None,
                     zero_covariates: bool = False) -> tuple[SurvivalDataset, np.ndarray]:
    """Draw one simulated dataset; also returns the true linear predictor."""
    if rng is None:
        rng = replicate_rng(config.seed, replicate)
    n, p, K, Q = config.n, config.p_scalar, config.k_functional, config.n_score_components
    s = config.grid
    scalar = rng.uniform(-1.0, 1.0, size=(n, p))
    phi = legendre_basis(s, Q)
    sd = np.sqrt(config.score_variance_slope * np.arange(1, Q + 1))
    scores = rng.standard_normal(size=(K, n, Q)) * sd
    functional = [scores[k] @ phi for k in range(K)]
    if zero_covariates:
        scalar = np.zeros_like(scalar)
        functional = [np.zeros_like(f) for f in functional]
    curves = config.true_curves(s)
    eta = scalar @ config.true_beta
    for k in range(5):
        eta = eta + functional[k] @ curves[k] / s.size
    rate = np.exp(config.baseline_log_hazard + eta)
    t = rng.exponential(1.0 / rate)
    c = rng.exponential(config.mean_censoring, size=n)
    y = np.minimum(t, c)
    delta = (t <= c).astype(np.int64)
    ds = SurvivalDataset(y, delta, scalar, functional, s,
                         [f"Z{j + 1}" for j in range(p)],
                         [f"F{k + 1}" for k in range(K)],
                         [f"s{i + 1:05d}" for i in range(n)])
    return ds, eta


METHODS = ("vsfcox", "grplasso")


@dataclass
class StudySettings:
    """Tuning settings shared by every replicate of a study."""

    method: str = "vsfcox"
    adaptive: bool = False
    adaptive_mode: str = "lambda"
    phi: float = 3.0
    psi_grid: tuple = tuple(np.logspace(-3, 3, 7))
    n_lambda: int = 50
    lambda_ratio: float = 1e-3
    sample_size: str = "events"
    size_scaling: bool = True
    degree: int = 3
    num_basis: int = 10

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        self.psi_grid = tuple(float(x) for x in self.psi_grid)

    @property
    def family(self) -> str:
        return "mcp" if self.method == "vsfcox" else "lasso"


@dataclass
class ReplicateRecord:
    replicate: int
    error: str = ""
    selected_scalars: np.ndarray | None = None
    selected_groups: np.ndarray | None = None
    beta: np.ndarray | None = None
    curves: np.ndarray | None = None
    lam: float = np.nan
    psi: float = np.nan
    ebic: float = np.nan
    censoring: float = np.nan
    failed_cells: int = 0

    @property
    def ok(self) -> bool:
        return not self.error


def tune_and_fit(dataset: SurvivalDataset, settings: StudySettings, *, eval_grid=None):
    """EBIC-tuned fit of one dataset (two stages when adaptive).

    Returns (surface, coefficients, builder).
    """
    from .solver import PenaltyConfig
    from .tuning import adaptive_grid_search, grid_search
    builder = DesignBuilder(dataset, degree=settings.degree, num_basis=settings.num_basis)
    penalty = PenaltyConfig(settings.family, 0.0, settings.phi,
                            size_scaling=settings.size_scaling)
    kw = dict(n_lambda=settings.n_lambda, lambda_ratio=settings.lambda_ratio,
              sample_size=settings.sample_size)
    surface = grid_search(builder, None, settings.psi_grid, penalty, **kw)
    if settings.adaptive:
        surface, _, _ = adaptive_grid_search(builder, surface, settings.psi_grid, penalty,
                                             mode=settings.adaptive_mode, **kw)
    best = surface.best
    grid = dataset.grid if eval_grid is None else eval_grid
    coefs = backtransform(best.fit.theta, surface.best_design, builder.bases, grid)
    return surface, coefs, builder


def run_replicate(config: SimConfig, settings: StudySettings, replicate: int) -> ReplicateRecord:
    rec = ReplicateRecord(replicate)
    try:
        ds, _ = generate_dataset(config, replicate)
        rec.censoring = float(1.0 - ds.delta.mean())
        surface, coefs, _ = tune_and_fit(ds, settings)
    except FuncoxError as exc:
        rec.error = f"{type(exc).__name__}: {exc}"
        return rec
    best = surface.best
    sel_s = np.zeros(config.p_scalar, bool)
    sel_s[best.fit.selected_scalars] = True
    sel_g = np.zeros(config.k_functional, bool)
    sel_g[best.fit.selected_groups] = True
    rec.selected_scalars, rec.selected_groups = sel_s, sel_g
    rec.beta = coefs.beta
    rec.curves = coefs.functions
    rec.lam, rec.psi, rec.ebic = best.lam, best.psi, best.ebic
    rec.failed_cells = sum(not c.ok for col in surface.cells for c in col)
    return rec


def _replicate_task(args):
    return run_replicate(*args)


def thread_count(threads: int | None = None) -> int:
    """Worker processes: explicit value, else FUNCOX_THREADS, else all cores."""
    if threads is None:
        env = os.environ.get("FUNCOX_THREADS", "").strip()
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise ConfigurationError(f"FUNCOX_THREADS must be an integer, got {env!r}")
        else:
            threads = os.cpu_count() or 1
    if threads < 1:
        raise ConfigurationError(f"thread count must be positive, got {threads}")
    return threads


@dataclass
class McMetrics:
    config: SimConfig
    settings: StudySettings
    records: list[ReplicateRecord] = field(repr=False)
    tpr: dict = field(default_factory=dict)
    fpr: dict = field(default_factory=dict)
    avg_model_size: float = np.nan
    bias: np.ndarray | None = None
    mse: np.ndarray | None = None
    mise: np.ndarray | None = None
    n_failed: int = 0

    @property
    def n_ok(self) -> int:
        return len(self.records) - self.n_failed

    def summary(self) -> dict:
        return {
            "n": self.config.n, "replicates": len(self.records), "failed": self.n_failed,
            "method": self.settings.method, "adaptive": self.settings.adaptive,
            "tpr_scalar": self.tpr.get("scalar"), "tpr_functional": self.tpr.get("functional"),
            "tpr_all": self.tpr.get("all"), "fpr_scalar": self.fpr.get("scalar"),
            "fpr_functional": self.fpr.get("functional"), "fpr_all": self.fpr.get("all"),
            "model_size": self.avg_model_size,
        }


def selection_rates(selected: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """(TPR, FPR) of one boolean selection vector against a boolean truth."""
    selected = np.asarray(selected, bool)
    truth = np.asarray(truth, bool)
    tpr = selected[truth].mean() if truth.any() else np.nan
    fpr = selected[~truth].mean() if (~truth).any() else np.nan
    return float(tpr), float(fpr)


def aggregate(config: SimConfig, settings: StudySettings,
              records: list[ReplicateRecord]) -> McMetrics:
    ok = [r for r in records if r.ok]
    out = McMetrics(config, settings, records, n_failed=len(records) - len(ok))
    if not ok:
        return out
    ts = np.zeros(config.p_scalar, bool)
    ts[config.true_scalar_set] = True
    tg = np.zeros(config.k_functional, bool)
    tg[config.true_group_set] = True
    S = np.array([r.selected_scalars for r in ok])
    G = np.array([r.selected_groups for r in ok])
    both = np.hstack([S, G])
    tb = np.concatenate([ts, tg])
    for key, sel, truth in (("scalar", S, ts), ("functional", G, tg), ("all", both, tb)):
        out.tpr[key] = float(sel[:, truth].mean())
        out.fpr[key] = float(sel[:, ~truth].mean())
    out.avg_model_size = float(both.sum(axis=1).mean())
    idx = config.true_scalar_set
    err = np.array([r.beta[idx] for r in ok]) - config.true_beta[idx]
    out.bias = err.mean(axis=0)
    out.mse = (err ** 2).mean(axis=0)
    true_curves = config.true_curves()
    gidx = config.true_group_set
    sq = np.array([(r.curves[gidx] - true_curves[gidx]) ** 2 for r in ok])
    out.mise = sq.sum(axis=2).mean(axis=0) / config.n_grid
    return out


def run_mc_study(config: SimConfig, settings: StudySettings | None = None, *,
                 threads: int | None = None, replicates=None) -> McMetrics:
    """Monte Carlo study; failed replicates are counted, never dropped silently."""
    settings = StudySettings() if settings is None else settings
    reps = range(config.n_replicates) if replicates is None else list(replicates)
    tasks = [(config, settings, r) for r in reps]
    nthreads = min(thread_count(threads), max(len(tasks), 1))
    if nthreads > 1:
        with ProcessPoolExecutor(max_workers=nthreads) as pool:
            records = list(pool.map(_replicate_task, tasks))
    else:
        records = [_replicate_task(t) for t in tasks]
    for r in records:
        if not r.ok:
            log.warning("replicate %d failed: %s", r.replicate, r.error)
    return aggregate(config, settings, records)


def mc_curve_summary(metrics: McMetrics) -> dict[int, np.ndarray]:
    """Per true group: array with columns s, truth, MC mean, 2.5% and 97.5% quantiles."""
    ok = [r for r in metrics.records if r.ok]
    s = metrics.config.grid
    truth = metrics.config.true_curves()
    out = {}
    for g in metrics.config.true_group_set:
        if ok:
            c = np.array([r.curves[g] for r in ok])
            mean, lo, hi = c.mean(0), np.quantile(c, 0.025, axis=0), np.quantile(c, 0.975, axis=0)
        else:
            mean = lo = hi = np.full(s.size, np.nan)
        out[int(g)] = np.column_stack([s, truth[g], mean, lo, hi])
    return out


def augment_with_pseudo(dataset: SurvivalDataset, count: int, seed, hours=None,
                        first_index: int = 13) -> SurvivalDataset:
    """Dataset with ``count`` pseudo functional covariates appended."""
    from .lmoments import pseudo_covariates
    if count == 0:
        return dataset
    hours = dataset.grid if hours is None else hours
    blocks = pseudo_covariates(dataset.n, count, seed, hours, first_index=first_index)
    names = [f"pseudo{j}" for j in range(first_index, first_index + count)]
    return SurvivalDataset(dataset.y, dataset.delta, dataset.scalar,
                           list(dataset.functional) + blocks, dataset.grid,
                           list(dataset.scalar_names), list(dataset.functional_names) + names,
                           dataset.subject_ids)


def _stability_task(args):
    dataset, count, seed, b, hours, settings = args
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(b),))
    aug = augment_with_pseudo(dataset, count, ss, hours)
    try:
        surface, _, _ = tune_and_fit(aug, settings)
    except FuncoxError as exc:
        return None, f"{type(exc).__name__}: {exc}"
    fit = surface.best.fit
    sel = np.zeros(aug.p + aug.k, bool)
    sel[fit.selected_scalars] = True
    sel[aug.p + fit.selected_groups] = True
    return sel, ""


@dataclass
class StabilityResult:
    names: list[str]
    kinds: list[str]
    percentages: np.ndarray
    n_runs: int
    n_failed: int
    errors: list[str] = field(default_factory=list)


def selection_stability(dataset: SurvivalDataset, pseudo_count: int = 10, reps: int = 100,
                        seed: int = 0, settings: StudySettings | None = None, *,
                        hours=None, threads: int | None = None) -> StabilityResult:
    """Selection percentage of every variable over ``reps`` fresh pseudo augmentations."""
    if reps < 1 or pseudo_count < 0:
        raise ConfigurationError("need reps >= 1 and pseudo_count >= 0")
    settings = StudySettings() if settings is None else settings
    tasks = [(dataset, pseudo_count, seed, b, hours, settings) for b in range(reps)]
    nthreads = min(thread_count(threads), reps)
    if nthreads > 1:
        with ProcessPoolExecutor(max_workers=nthreads) as pool:
            results = list(pool.map(_stability_task, tasks))
    else:
        results = [_stability_task(t) for t in tasks]
    names = list(dataset.scalar_names) + list(dataset.functional_names) + \
        [f"pseudo{j}" for j in range(13, 13 + pseudo_count)]
    kinds = ["scalar"] * dataset.p + ["functional"] * dataset.k + ["pseudo"] * pseudo_count
    good = [s for s, e in results if s is not None]
    errors = [e for s, e in results if s is None]
    pct = 100.0 * np.mean(good, axis=0) if good else np.full(len(names), np.nan)
    return StabilityResult(names, kinds, pct, reps, len(errors), errors)
