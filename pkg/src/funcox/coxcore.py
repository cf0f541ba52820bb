"""Cox partial likelihood pieces with Breslow handling of tied event times.

Subjects are sorted by observed time once; every risk set is then a suffix of
that ordering, so the likelihood and the expected events cost O(n) per call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import InputError

ETA_CLAMP = 500.0


@dataclass(frozen=True)
class RiskStructure:
    """Sorted-order encoding of the risk sets.

    ``order`` sorts subjects by increasing time. For sorted position ``k``,
    ``start[k]`` is the first position of its tie group (so the risk set of
    that time is ``order[start[k]:]``) and ``end[k]`` is one past the last.
    """

    order: np.ndarray
    start: np.ndarray
    end: np.ndarray
    delta_sorted: np.ndarray
    time_sorted: np.ndarray

    @property
    def n(self) -> int:
        return self.order.size

    @property
    def n_events(self) -> int:
        return int(self.delta_sorted.sum())

    @property
    def tie_groups(self) -> list[np.ndarray]:
        """Subject indices sharing an event time, one array per distinct event time."""
        groups = []
        for s in np.unique(self.start[self.delta_sorted > 0]):
            members = self.order[s:self.end[s]]
            ev = self.delta_sorted[s:self.end[s]] > 0
            groups.append(np.sort(members[ev]))
        return groups

    def risk_set(self, subject: int) -> np.ndarray:
        """Indices at risk at the observed time of ``subject``."""
        pos = int(np.flatnonzero(self.order == subject)[0])
        return np.sort(self.order[self.start[pos]:])


def build_risk_structure(y, delta) -> RiskStructure:
    y = np.asarray(y, dtype=float)
    delta = np.asarray(delta)
    if y.ndim != 1 or delta.shape != y.shape:
        raise InputError("time and event vectors must be 1-d with equal length")
    if y.size == 0:
        raise InputError("no subjects")
    if np.any(~np.isfinite(y)) or np.any(y <= 0):
        raise InputError("observed times must be finite and strictly positive")
    if not np.all((delta == 0) | (delta == 1)):
        raise InputError("event indicators must be 0 or 1")
    if not np.any(delta == 1):
        raise InputError("no events: the partial likelihood is undefined")
    order = np.argsort(y, kind="stable")
    ts = y[order]
    n = ts.size
    new_group = np.r_[True, ts[1:] != ts[:-1]]
    group_id = np.cumsum(new_group) - 1
    firsts = np.flatnonzero(new_group)
    lasts = np.r_[firsts[1:], n]
    start = firsts[group_id]
    end = lasts[group_id]
    return RiskStructure(order, start.astype(np.int64), end.astype(np.int64),
                         delta[order].astype(float), ts)


@njit(cache=True)
def _sorted_terms_hess(eta_s, delta_s, start, end):
    """Log partial likelihood, expected events and the diagonal of the Hessian
    of -loglik in eta, all in sorted order.

    Risk-set sums and cumulative hazards are accumulated in the log domain so
    that widely spread linear predictors neither overflow nor underflow.
    """
    n = eta_s.size
    et = np.empty(n)
    for i in range(n):
        et[i] = min(max(eta_s[i], -ETA_CLAMP), ETA_CLAMP)
    # log of suffix sums of exp(eta)
    log_suffix = np.empty(n)
    run_max = -np.inf
    run_sum = 0.0
    for i in range(n - 1, -1, -1):
        if et[i] > run_max:
            run_sum = run_sum * np.exp(run_max - et[i]) + 1.0
            run_max = et[i]
        else:
            run_sum += np.exp(et[i] - run_max)
        log_suffix[i] = run_max + np.log(run_sum)
    loglik = 0.0
    log_h1 = np.empty(n)
    log_h2 = np.empty(n)
    a1 = -np.inf
    a2 = -np.inf
    for i in range(n):
        if delta_s[i] > 0:
            ls = log_suffix[start[i]]
            t1 = np.log(delta_s[i]) - ls
            t2 = t1 - ls
            a1 = np.logaddexp(a1, t1)
            a2 = np.logaddexp(a2, t2)
            loglik += delta_s[i] * (eta_s[i] - ls)
        log_h1[i] = a1
        log_h2[i] = a2
    e = np.empty(n)
    h = np.empty(n)
    for i in range(n):
        e[i] = np.exp(et[i] + log_h1[end[i] - 1])
        hi = e[i] - np.exp(2.0 * et[i] + log_h2[end[i] - 1])
        h[i] = hi if hi > 0.0 else 0.0
    return loglik, e, h


@njit(cache=True)
def _sorted_terms(eta_s, delta_s, start, end):
    """Log partial likelihood and expected events in sorted order."""
    loglik, e, _ = _sorted_terms_hess(eta_s, delta_s, start, end)
    return loglik, e


@njit(cache=True)
def _hessian_product(eta_s, delta_s, start, end, V):
    """Exact Hessian of -loglik in eta (sorted order) times each column of V.

    (H v)_i = e_i v_i - sum_{g: i in R_g} d_g (w_i / S_g) * mean_{R_g}(v), with
    the risk-set means and the scaled sums kept overflow-free.
    """
    n, a = V.shape
    et = np.empty(n)
    for i in range(n):
        et[i] = min(max(eta_s[i], -ETA_CLAMP), ETA_CLAMP)
    log_suffix = np.empty(n)
    means = np.empty((n, a))
    run_max = -np.inf
    run_sum = 0.0
    run_v = np.zeros(a)
    for i in range(n - 1, -1, -1):
        if et[i] > run_max:
            r = np.exp(run_max - et[i])
            run_sum = run_sum * r + 1.0
            for c in range(a):
                run_v[c] = run_v[c] * r + V[i, c]
            run_max = et[i]
        else:
            wi = np.exp(et[i] - run_max)
            run_sum += wi
            for c in range(a):
                run_v[c] += wi * V[i, c]
        log_suffix[i] = run_max + np.log(run_sum)
        for c in range(a):
            means[i, c] = run_v[c] / run_sum
    # forward accumulation over event times, scaled by exp(ref)
    ref_at = np.empty(n)
    acc_at = np.empty((n, a))
    acc1_at = np.empty(n)
    ref = -np.inf
    acc = np.zeros(a)
    acc1 = 0.0
    for i in range(n):
        if delta_s[i] > 0:
            ls = log_suffix[start[i]]
            new_ref = -ls
            if new_ref > ref:
                r = np.exp(ref - new_ref) if np.isfinite(ref) else 0.0
                acc1 *= r
                for c in range(a):
                    acc[c] *= r
                ref = new_ref
            wgt = delta_s[i] * np.exp(-ls - ref)
            acc1 += wgt
            for c in range(a):
                acc[c] += wgt * means[start[i], c]
        ref_at[i] = ref
        acc1_at[i] = acc1
        for c in range(a):
            acc_at[i, c] = acc[c]
    out = np.empty((n, a))
    for i in range(n):
        j = end[i] - 1
        if not np.isfinite(ref_at[j]):
            for c in range(a):
                out[i, c] = 0.0
            continue
        scale = np.exp(et[i] + ref_at[j])
        ei = scale * acc1_at[j]
        for c in range(a):
            out[i, c] = ei * V[i, c] - scale * acc_at[j, c]
    return out


def _check_eta(eta, rs: RiskStructure) -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (rs.n,):
        raise InputError(f"linear predictor has shape {eta.shape}, expected ({rs.n},)")
    if np.any(np.isnan(eta)):
        raise InputError("linear predictor contains NaN")
    return eta


def log_partial_likelihood(eta, rs: RiskStructure) -> float:
    eta = _check_eta(eta, rs)
    ll, _ = _sorted_terms(eta[rs.order], rs.delta_sorted, rs.start, rs.end)
    return float(ll)


def expected_events(eta, rs: RiskStructure) -> np.ndarray:
    eta = _check_eta(eta, rs)
    _, e_sorted = _sorted_terms(eta[rs.order], rs.delta_sorted, rs.start, rs.end)
    e = np.empty(rs.n)
    e[rs.order] = e_sorted
    return e


def working_residual(delta, e) -> np.ndarray:
    delta = np.asarray(delta, dtype=float)
    e = np.asarray(e, dtype=float)
    if delta.shape != e.shape:
        raise InputError("event indicators and expected events differ in length")
    return delta - e
