import math
from fractions import Fraction

import numpy as np
import pytest

from funcox.coxcore import build_risk_structure
from funcox.design import DesignBuilder
from funcox.errors import ConfigurationError, InputError, NumericalError
from funcox.solver import PenaltyConfig, fit
from funcox.splines import build_basis
from funcox.tuning import (DEFAULT_PSI_GRID, CellRecord, _pick_optimum, adaptive_configuration,
                           adaptive_grid_search, adaptive_penalty_matrices, adaptive_weights,
                           degrees_of_freedom, ebic, grid_search, information_criteria,
                           lambda_grid, log_binomial)

from conftest import small_dataset


class TestCriteria:
    @pytest.mark.parametrize("n,k", [(35, 8), (35, 0), (35, 35), (200, 17), (10, 3)])
    def test_log_binomial_exact(self, n, k):
        assert log_binomial(n, k) == pytest.approx(math.log(math.comb(n, k)), abs=1e-10)

    def test_log_binomial_invalid(self):
        with pytest.raises(ValueError):
            log_binomial(5, 6)

    def test_ebic_by_hand(self, dataset):
        builder = DesignBuilder(dataset)
        d = builder.build(1.0)
        rs = build_risk_structure(dataset.y, dataset.delta)
        res = fit(d, rs, PenaltyConfig(lam=0.02))
        nu = res.model_size
        df = degrees_of_freedom(res, d.ranks)
        assert df == res.selected_scalars.size + 10 * res.selected_groups.size
        p_total = 5
        expect = (-2 * res.final_loglik + df * math.log(int(dataset.delta.sum()))
                  + 2 * math.log(math.comb(p_total, nu)))
        _, bic, eb = information_criteria(res, rs, p_total, d.ranks)
        assert eb == pytest.approx(expect, rel=1e-12)
        assert eb - bic == pytest.approx(2 * math.log(math.comb(p_total, nu)))
        _, bic_n, _ = information_criteria(res, rs, p_total, d.ranks, "n")
        assert bic_n - bic == pytest.approx(df * math.log(dataset.n / dataset.delta.sum()))
        with pytest.raises(ConfigurationError):
            information_criteria(res, rs, p_total, d.ranks, "subjects")
        # one degree of freedom per group when no ranks are given
        assert ebic(res, rs, p_total) == pytest.approx(
            -2 * res.final_loglik + nu * math.log(dataset.delta.sum()) + 2 * log_binomial(5, nu))

    def test_lambda_grid(self):
        g = lambda_grid(2.0, 5, 1e-2)
        np.testing.assert_allclose(g, 2.0 * np.logspace(0, -2, 5))
        with pytest.raises(ConfigurationError):
            lambda_grid(0.0)
        with pytest.raises(ConfigurationError):
            lambda_grid(1.0, 10, 0.0)


def cell(lam, psi, value, ok=True):
    return CellRecord(lam, psi, error=None if ok else "failed", ebic=value)


class TestOptimum:
    def test_minimum(self):
        cells = [[cell(1, 0.1, 5.0), cell(0.5, 0.1, 3.0)], [cell(1, 1, 4.0), cell(0.5, 1, 3.5)]]
        assert _pick_optimum(cells) == (0, 1)

    def test_ties_prefer_larger_lambda_then_psi(self):
        cells = [[cell(1, 0.1, 3.0), cell(0.5, 0.1, 3.0)], [cell(1, 1, 3.0), cell(0.5, 1, 3.0)]]
        assert _pick_optimum(cells) == (1, 0)

    def test_failed_cells_ignored(self):
        cells = [[cell(1, 0.1, 5.0), cell(0.5, 0.1, 1.0, ok=False)]]
        assert _pick_optimum(cells) == (0, 0)
        assert _pick_optimum([[cell(1, 0.1, 1.0, ok=False)]]) is None


class TestGridSearch:
    @pytest.fixture
    def builder(self, dataset):
        return DesignBuilder(dataset)

    def test_surface(self, builder):
        surf = grid_search(builder, None, [0.01, 1.0, 100.0], PenaltyConfig(), n_lambda=12,
                           spot_checks=2, seed=3)
        assert surf.lambdas.shape == (3, 12)
        E = surf.ebic_matrix()
        assert E.shape == (3, 12)
        j, i = surf.optimum
        assert E[j, i] == pytest.approx(np.nanmin(E), rel=1e-9)
        assert surf.cells[0][0].model_size == 0
        assert len(surf.spot_checks) == 2
        rows = surf.rows()
        assert len(rows) == 36 and sum(r["optimum"] for r in rows) == 1

    def test_rotated_warm_start_matches_cold(self, builder, dataset):
        # LASSO is convex, so warm and cold starts must agree
        pen = PenaltyConfig("lasso")
        surf = grid_search(builder, None, [0.1, 10.0], pen, n_lambda=8)
        rs = build_risk_structure(dataset.y, dataset.delta)
        d = surf.designs[1]
        for c in surf.cells[1]:
            cold = fit(d, rs, pen.with_lambda(c.lam), tol=1e-10)
            assert np.abs(d.X @ (cold.theta - c.fit.theta)).max() < 1e-4

    def test_fixed_lambda_grid_and_validation(self, builder):
        surf = grid_search(builder, [0.01, 0.1, 0.05], [1.0])
        np.testing.assert_allclose(surf.lambdas[0], [0.1, 0.05, 0.01])
        with pytest.raises(ConfigurationError):
            grid_search(builder, None, [])
        with pytest.raises(ConfigurationError):
            grid_search(builder, None, [-1.0])
        with pytest.raises(ConfigurationError):
            grid_search(builder, [-0.1], [1.0])

    def test_keep_fits(self, builder):
        surf = grid_search(builder, None, [1.0], n_lambda=5, keep_fits=False)
        kept = [c.fit is not None for col in surf.cells for c in col]
        assert sum(kept) == 1 and surf.best.fit is not None

    def test_all_failed(self):
        ds = small_dataset(n=30)
        surf = grid_search(DesignBuilder(ds), None, [1.0], n_lambda=3)
        for c in surf.cells[0]:
            c.error = "x"
        surf.optimum = None
        with pytest.raises(NumericalError):
            surf.best


class TestAdaptive:
    def test_weights_sine(self):
        s = np.linspace(0, 1, 2001)
        f = np.vstack([np.sin(np.pi * s), 2 * np.sin(np.pi * s), np.zeros_like(s)])
        f2 = -np.pi ** 2 * f
        w, v = adaptive_weights(f, f2, s, cap=1e6)
        # norms 1/sqrt(2) and sqrt(2): raw weights sqrt(2), 1/sqrt(2), then the cap
        np.testing.assert_allclose(w, [2.0, 1.0, 1e6 * np.sqrt(2)], rtol=1e-6)
        np.testing.assert_allclose(v, [2.0, 1.0, 1e6 * np.sqrt(2) * np.pi ** 2], rtol=1e-6)
        assert w.min() == 1.0

    def test_weights_errors(self):
        s = np.linspace(0, 1, 11)
        with pytest.raises(NumericalError):
            adaptive_weights(np.zeros((2, 11)), np.zeros((2, 11)), s)
        with pytest.raises(InputError):
            adaptive_weights(np.ones((2, 11)), np.ones((2, 10)), s)

    def test_lambda_mode_same_quadratic_form(self):
        b = build_basis()
        from funcox.splines import gram_matrices
        R, Q = gram_matrices(b)
        w, v = np.array([3.0, 1.0]), np.array([2.0, 5.0])
        gw, rw, qw = adaptive_configuration(w, v, "lambda")
        coef = np.random.default_rng(0).normal(size=10)
        for k in range(2):
            full = coef @ (w[k] * R + 0.7 * v[k] * Q) @ coef
            split = gw[k] ** 2 * coef @ (rw[k] * R + 0.7 * qw[k] * Q) @ coef
            assert split == pytest.approx(full, rel=1e-12)
        gw, rw, qw = adaptive_configuration(w, v, "absorbed")
        assert gw is None and np.array_equal(rw, w) and np.array_equal(qw, v)
        with pytest.raises(ConfigurationError):
            adaptive_configuration(w, v, "other")

    def test_adaptive_penalty_matrices(self):
        b = build_basis()
        pm = adaptive_penalty_matrices(b, 2.0, 3.0, 0.5)
        L = pm.composite_chol
        np.testing.assert_allclose(L @ L.T, 3.0 * pm.gram + 2.0 * 0.5 * pm.curvature, atol=1e-12)
        with pytest.raises(ConfigurationError):
            adaptive_penalty_matrices(b, 1.0, 0.0, 1.0)

    def test_adaptive_search(self):
        # large enough for the first curve to be selected in the initial fit
        builder = DesignBuilder(small_dataset(n=150, seed=0))
        initial = grid_search(builder, None, [1.0], PenaltyConfig(), n_lambda=10)
        surf, w, v = adaptive_grid_search(builder, initial, [1.0], PenaltyConfig(), n_lambda=10)
        assert w.min() == 1.0 and v.min() == 1.0
        assert surf.optimum is not None


def test_default_psi_grid():
    np.testing.assert_allclose(DEFAULT_PSI_GRID, [1e-3, 1e-2, 1e-1, 1, 10, 100, 1000])


class TestSpecExamples:
    def test_ebic_equals_bic_at_extremes(self, dataset):
        builder = DesignBuilder(dataset)
        d = builder.build(1.0)
        rs = build_risk_structure(dataset.y, dataset.delta)
        null = fit(d, rs, PenaltyConfig(lam=10.0))
        _, bic, eb = information_criteria(null, rs, 5, d.ranks)
        assert eb == bic
        full = fit(d, rs, PenaltyConfig(lam=0.0))
        _, bic, eb = information_criteria(full, rs, 5, d.ranks)
        assert full.model_size == 5 and eb == pytest.approx(bic, abs=1e-9)

    def test_singleton_grid(self, dataset):
        builder = DesignBuilder(dataset)
        surf = grid_search(builder, [0.03], [2.0])
        d = builder.build(2.0)
        rs = build_risk_structure(dataset.y, dataset.delta)
        res = fit(d, rs, PenaltyConfig(lam=0.03))
        assert surf.best.ebic == pytest.approx(
            information_criteria(res, rs, 5, d.ranks)[2], rel=1e-9)

    def test_all_lambdas_above_max(self, dataset):
        surf = grid_search(DesignBuilder(dataset), [50.0, 100.0], [0.1, 1.0])
        assert all(c.model_size == 0 for col in surf.cells for c in col)
        assert surf.best.model_size == 0

    def test_weight_homogeneity(self):
        s = np.linspace(0, 1, 501)
        f = np.vstack([np.cos(np.pi * s)] * 3)
        w, _ = adaptive_weights(f, f, s)
        np.testing.assert_allclose(w, 1.0)
        f[1] *= 2
        w, _ = adaptive_weights(f, f, s)
        np.testing.assert_allclose(w, [1.0, 0.5, 1.0] / np.array(0.5), rtol=1e-12)

    def test_sine_norm_before_rescaling(self):
        s = np.linspace(0, 1, 4001)
        f = np.sin(np.pi * s)[None, :]
        from funcox.tuning import _trapezoid_norm
        assert 1 / _trapezoid_norm(f, s)[0] == pytest.approx(np.sqrt(2), rel=1e-6)

    def test_adaptive_matrices_special_cases(self):
        b = build_basis()
        plain = adaptive_penalty_matrices(b, 0.4, 1.0, 1.0)
        from funcox.splines import penalty_matrices
        np.testing.assert_allclose(plain.composite_chol, penalty_matrices(b, 0.4).composite_chol)
        scaled = adaptive_penalty_matrices(b, 7.0, 4.0, 0.0)
        np.testing.assert_allclose(scaled.composite_chol,
                                   2 * np.linalg.cholesky(scaled.gram), atol=1e-13)
        rng = np.random.default_rng(0)
        for _ in range(5):
            w, v, psi = rng.uniform(0.5, 5, 3)
            L = adaptive_penalty_matrices(b, psi, w, v).composite_chol
            np.testing.assert_allclose(L @ L.T, w * plain.gram + psi * v * plain.curvature,
                                       atol=1e-10)
