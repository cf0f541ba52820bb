"""Sample L-moments, windowed diurnal L-moment profiles and pseudo covariates.

Activity records are per-subject (days x minutes) count matrices on the
minute grid of a day. A profile value at time s pools every valid day's
minutes strictly inside (s - zeta, s + zeta) into one sample.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputError

MINUTES_PER_DAY = 1440
# coefficients of l_r in terms of the probability weighted moments b_0..b_3
_PWM_TO_L = np.array([
    [1.0, 0.0, 0.0, 0.0],
    [-1.0, 2.0, 0.0, 0.0],
    [1.0, -6.0, 6.0, 0.0],
    [-1.0, 12.0, -30.0, 20.0],
])


def sample_lmoments(x, max_order: int = 4) -> np.ndarray:
    """Unbiased sample L-moments l_1..l_max_order via probability weighted moments."""
    if not 1 <= int(max_order) <= 4:
        raise ConfigurationError(f"max_order must be between 1 and 4, got {max_order}")
    r = int(max_order)
    x = np.sort(np.asarray(x, dtype=float).ravel())
    n = x.size
    if n < r:
        raise InputError(f"need at least {r} observations for {r} L-moments, got {n}")
    if np.any(~np.isfinite(x)):
        raise InputError("sample contains non-finite values")
    i = np.arange(n, dtype=float)
    b = np.empty(r)
    w = np.ones(n)
    for k in range(r):
        if k:
            w = w * (i - (k - 1)) / (n - k)
        b[k] = np.dot(w, x) / n
    return _PWM_TO_L[:r, :r] @ b


def lmoment_ratios(l: np.ndarray) -> np.ndarray:
    """(tau_3, tau_4) from l_1..l_4; NaN where l_2 is zero."""
    l = np.asarray(l, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(l[..., 1:2] > 0, l[..., 2:4] / l[..., 1:2], np.nan)


@dataclass
class DiurnalProfileSet:
    subject_ids: list[str]
    grid: np.ndarray
    orders: tuple[int, ...]
    profiles: np.ndarray
    zeta: float
    rejected: dict[str, str] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.subject_ids)

    def block(self, order: int) -> np.ndarray:
        """n x m matrix of the profile for one L-moment order."""
        return self.profiles[:, self.orders.index(order), :]


def window_offsets(zeta_hours: float) -> np.ndarray:
    """Minute offsets d with |d| / 60 < zeta (the open window)."""
    if not np.isfinite(zeta_hours) or zeta_hours <= 0:
        raise ConfigurationError(f"zeta must be positive, got {zeta_hours}")
    half = zeta_hours * 60.0
    d = np.arange(-int(np.ceil(half)), int(np.ceil(half)) + 1)
    # guard the endpoint comparison against the rounding of zeta itself
    return d[np.abs(d) < half - 1e-9 * max(1.0, half)]


def output_minutes(window: tuple[float, float]) -> np.ndarray:
    lo, hi = window
    if not 0 <= lo <= hi <= 24:
        raise ConfigurationError(f"window must satisfy 0 <= start <= end <= 24, got {window}")
    m = np.arange(MINUTES_PER_DAY)
    h = m / 60.0
    return m[(h >= lo - 1e-12) & (h <= hi + 1e-12)]


def _subject_profile(counts, valid, orders, offsets, minutes, log1p):
    x = np.asarray(counts, dtype=float)[np.asarray(valid, dtype=bool)]
    if log1p:
        x = np.log1p(x)
    r = max(orders)
    out = np.empty((len(orders), minutes.size))
    bad = []
    for j, m in enumerate(minutes):
        cols = m + offsets
        cols = cols[(cols >= 0) & (cols < MINUTES_PER_DAY)]
        pooled = x[:, cols]
        pooled = pooled[np.isfinite(pooled)]
        if pooled.size < r:
            bad.append(int(m))
            out[:, j] = np.nan
            continue
        lm = sample_lmoments(pooled, r)
        out[:, j] = lm[[o - 1 for o in orders]]
    return out, bad


def _profile_task(args):
    return _subject_profile(*args)


def diurnal_profiles(records: dict[str, np.ndarray], orders=(1, 2, 3, 4), zeta: float = 5 / 60,
                     *, log1p: bool = True, window=(6.0, 22.0), valid_days: dict | None = None,
                     min_days: int = 4, threads: int = 1) -> DiurnalProfileSet:
    """Diurnal L-moment profiles for each subject.

    ``records`` maps subject id to a (days x 1440) count matrix, NaN for
    missing minutes. ``valid_days`` optionally maps subject id to a boolean
    mask of days to use. Subjects with fewer than ``min_days`` valid days or
    with a window that has too few observations are left out and listed in
    ``rejected``.
    """
    orders = tuple(sorted({int(o) for o in orders}))
    if not orders or orders[0] < 1 or orders[-1] > 4:
        raise ConfigurationError(f"orders must be a subset of 1..4, got {orders}")
    offsets = window_offsets(zeta)
    minutes = output_minutes(window)
    ids = sorted(records)
    tasks, kept, rejected = [], [], {}
    for sid in ids:
        counts = np.asarray(records[sid], dtype=float)
        if counts.ndim != 2 or counts.shape[1] != MINUTES_PER_DAY:
            raise InputError(f"subject {sid}: expected a days x {MINUTES_PER_DAY} matrix")
        valid = np.ones(counts.shape[0], bool) if valid_days is None else \
            np.asarray(valid_days.get(sid, np.ones(counts.shape[0], bool)), dtype=bool)
        if valid.sum() < min_days:
            rejected[sid] = f"{int(valid.sum())} valid days, need {min_days}"
            continue
        if np.any(counts[valid] < 0):
            raise InputError(f"subject {sid}: negative activity counts")
        tasks.append((counts, valid, orders, offsets, minutes, log1p))
        kept.append(sid)
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_profile_task, tasks, chunksize=16))
    else:
        results = [_profile_task(t) for t in tasks]
    final_ids, profs = [], []
    for sid, (prof, bad) in zip(kept, results):
        if bad:
            rejected[sid] = f"{len(bad)} window(s) with too few observations, first at minute {bad[0]}"
            continue
        final_ids.append(sid)
        profs.append(prof)
    arr = np.array(profs) if profs else np.zeros((0, len(orders), minutes.size))
    return DiurnalProfileSet(final_ids, minutes / 60.0, orders, arr, float(zeta), rejected)


def interaction_profiles(profiles: DiurnalProfileSet, scalar) -> list[np.ndarray]:
    """Pointwise products scalar_i * L_ir(s), one n x m block per order."""
    c = np.asarray(scalar, dtype=float)
    if c.shape != (profiles.n,):
        raise InputError(f"scalar has shape {c.shape}, expected ({profiles.n},)")
    return [profiles.block(o) * c[:, None] for o in profiles.orders]


def pseudo_covariates(n: int, count: int, seed, hours, *, first_index: int = 13,
                      score_sd: float = 2.0) -> list[np.ndarray]:
    """Random functional covariates a*sqrt(2) sin(pi j h / 24) + b*sqrt(2) cos(pi j h / 24).

    a and b are drawn per subject with standard deviation ``score_sd``;
    j runs from ``first_index`` over the ``count`` blocks.
    """
    if count < 1 or n < 1:
        raise ConfigurationError("need at least one subject and one pseudo covariate")
    h = np.asarray(hours, dtype=float)
    rng = np.random.default_rng(seed)
    out = []
    for j in range(first_index, first_index + count):
        a = rng.normal(0.0, score_sd, size=n)
        b = rng.normal(0.0, score_sd, size=n)
        arg = np.pi * j * h / 24.0
        out.append(np.sqrt(2.0) * (np.outer(a, np.sin(arg)) + np.outer(b, np.cos(arg))))
    return out

