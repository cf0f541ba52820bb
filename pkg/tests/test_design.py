import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from funcox.coxcore import build_risk_structure
from funcox.design import (DesignBuilder, SurvivalDataset, backtransform, functional_scores,
                           gamma_from_b, original_linear_predictor, standardize_and_orthonormalize)
from funcox.errors import ConfigurationError, InputError
from funcox.solver import PenaltyConfig, fit, path_lambda_max
from funcox.splines import build_basis, evaluate_basis
from funcox.tuning import DEFAULT_PSI_GRID

from conftest import small_dataset


class TestScores:
    def test_riemann_sum(self, dataset):
        b = build_basis(3, 10)
        Z = functional_scores(dataset, [b, b])
        theta = evaluate_basis(b, dataset.grid)
        m = dataset.m
        i, c = 5, 4
        manual = sum(dataset.functional[1][i, l] * theta[l, c] for l in range(m)) / m
        assert Z[1][i, c] == pytest.approx(manual, rel=1e-12)

    def test_basis_count_mismatch(self, dataset):
        with pytest.raises(InputError):
            functional_scores(dataset, [build_basis()])


class TestReparameterization:
    def test_quadratic_form_equals_norm(self, dataset):
        builder = DesignBuilder(dataset)
        rng = np.random.default_rng(0)
        for psi in DEFAULT_PSI_GRID:
            L = builder.chol(0, psi)
            K = builder.penalty(0, psi)
            for _ in range(5):
                b = rng.normal(size=10)
                g = gamma_from_b(b, L)
                assert abs(b @ K @ b - g @ g) <= 1e-10 * max(1.0, b @ K @ b)

    def test_eigen_factor_same_form(self, dataset):
        builder = DesignBuilder(dataset, factorization="eigen")
        b = np.random.default_rng(1).normal(size=10)
        F = builder.chol(1, 3.0)
        g = gamma_from_b(b, F)
        assert b @ builder.penalty(1, 3.0) @ b == pytest.approx(g @ g, rel=1e-10)

    def test_unknown_factorization(self, dataset):
        with pytest.raises(ConfigurationError):
            DesignBuilder(dataset, factorization="qr")


class TestOrthonormalization:
    def test_blocks_orthonormal(self, dataset):
        d = DesignBuilder(dataset).build(1.0)
        n = d.n
        np.testing.assert_allclose(d.scalar_block.mean(0), 0, atol=1e-12)
        np.testing.assert_allclose((d.scalar_block ** 2).mean(0), 1, atol=1e-12)
        for B in d.group_blocks:
            np.testing.assert_allclose(B.T @ B / n, np.eye(B.shape[1]), atol=1e-9)
            np.testing.assert_allclose(B.mean(0), 0, atol=1e-10)
        assert d.ranks.tolist() == [10, 10]

    def test_rank_reduction(self):
        ds = small_dataset()
        # a curve family living in a 2-dimensional space
        rng = np.random.default_rng(3)
        a = rng.normal(size=(ds.n, 2))
        ds.functional[1] = a[:, :1] * np.ones(ds.m) + a[:, 1:] * ds.grid
        d = DesignBuilder(ds).build(1.0)
        assert d.ranks[1] == 2
        assert any("rank 2" in w for w in d.warnings)

    def test_rank_zero_group(self):
        ds = small_dataset()
        ds.functional[0] = np.tile(np.sin(ds.grid), (ds.n, 1))
        d = DesignBuilder(ds).build(1.0)
        assert d.ranks[0] == 0
        assert d.group_slice(0).stop == d.group_slice(0).start

    def test_backtransform_linear_predictor(self, dataset):
        builder = DesignBuilder(dataset)
        d = builder.build(0.1)
        theta = np.random.default_rng(2).normal(size=d.n_columns) * 0.1
        coefs = backtransform(theta, d, builder.bases, dataset.grid)
        eta_orig = original_linear_predictor(dataset, coefs, builder.scores)
        np.testing.assert_allclose(d.X @ theta + coefs.offset, eta_orig, atol=1e-10)
        assert coefs.functions.shape == (2, dataset.m)

    def test_constant_scalar(self):
        with pytest.raises(InputError, match="constant"):
            standardize_and_orthonormalize(np.ones((10, 1)), [])

    def test_too_few_subjects(self):
        ds = small_dataset(n=9, m=11)
        with pytest.raises(InputError):
            DesignBuilder(ds).build(1.0)

    def test_negative_psi(self, dataset):
        with pytest.raises(ConfigurationError):
            DesignBuilder(dataset).build(-1.0)


class TestDataset:
    def test_validation(self):
        ds = small_dataset(n=20)
        with pytest.raises(InputError):
            SurvivalDataset(ds.y, ds.delta, ds.scalar, [ds.functional[0][:, :-1]], ds.grid)
        bad = ds.scalar.copy()
        bad[0, 0] = np.nan
        with pytest.raises(InputError):
            SurvivalDataset(ds.y, ds.delta, bad, ds.functional, ds.grid)
        with pytest.raises(InputError):
            SurvivalDataset(ds.y, ds.delta, ds.scalar, ds.functional, ds.grid[::-1])

    def test_subset(self, dataset):
        sub = dataset.subset([0, 3, 5])
        assert sub.n == 3 and sub.functional[1].shape == (3, dataset.m)


def test_factorization_invariance_of_fitted_curves():
    ds = small_dataset(n=120, seed=4)
    rs = build_risk_structure(ds.y, ds.delta)
    grid = np.linspace(0, 1, 101)
    for psi in DEFAULT_PSI_GRID:
        curves = []
        for fac in ("cholesky", "eigen"):
            builder = DesignBuilder(ds, factorization=fac)
            d = builder.build(psi)
            pen = PenaltyConfig()
            res = fit(d, rs, pen.with_lambda(0.2 * path_lambda_max(d, rs, pen)), tol=1e-12)
            curves.append(backtransform(res.theta, d, builder.bases, grid).functions)
        assert np.abs(curves[0] - curves[1]).max() < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(DEFAULT_PSI_GRID), st.integers(0, 1000), st.integers(5, 12))
def test_norm_identity_property(psi, seed, num_basis):
    ds = small_dataset(n=30, k=1, m=21, seed=1)
    builder = DesignBuilder(ds, num_basis=num_basis)
    b = np.random.default_rng(seed).normal(size=num_basis)
    g = gamma_from_b(b, builder.chol(0, psi))
    q = b @ builder.penalty(0, psi) @ b
    assert abs(q - g @ g) <= 1e-10 * max(1.0, q)


class TestSpecExamples:
    def test_zero_and_constant_curves(self):
        ds = small_dataset(n=20, k=1, m=101)
        ds.functional[0][0] = 0.0
        ds.functional[0][1] = 1.0
        b = build_basis(3, 10)
        Z = functional_scores(ds, [b])[0]
        assert not np.any(Z[0])
        np.testing.assert_allclose(Z[1], evaluate_basis(b, ds.grid).mean(axis=0), atol=1e-15)

    def test_sine_scores_double_loop(self):
        ds = small_dataset(n=3, k=1, m=101)
        ds.functional[0][:] = np.sin(np.pi * ds.grid)
        b = build_basis(3, 10)
        Z = functional_scores(ds, [b])[0]
        theta = evaluate_basis(b, ds.grid)
        ref = np.zeros(10)
        for c in range(10):
            for l in range(101):
                ref[c] += np.sin(np.pi * ds.grid[l]) * theta[l, c]
        np.testing.assert_allclose(Z[0], ref / 101, atol=1e-14)

    def test_identity_factor_and_round_trip(self):
        from funcox.design import b_from_gamma, reparameterize
        rng = np.random.default_rng(0)
        S = rng.normal(size=(5, 4))
        np.testing.assert_array_equal(reparameterize(S, np.eye(4)), S)
        builder = DesignBuilder(small_dataset(n=20))
        L = builder.chol(0, 0.1)
        b = rng.normal(size=10)
        np.testing.assert_allclose(b_from_gamma(gamma_from_b(b, L), L), b, atol=1e-12)

    def test_duplicated_column(self):
        rng = np.random.default_rng(1)
        g = rng.normal(size=(50, 3))
        g = np.column_stack([g, g[:, 1]])
        d = standardize_and_orthonormalize(rng.normal(size=(50, 1)), [g])
        assert d.ranks.tolist() == [3]

    def test_random_group_orthonormal(self):
        rng = np.random.default_rng(2)
        d = standardize_and_orthonormalize(rng.normal(size=(50, 1)), [rng.normal(size=(50, 4))])
        B = d.group_blocks[0]
        np.testing.assert_allclose(B.T @ B / 50, np.eye(4), atol=1e-10)

    def test_already_orthonormal(self):
        rng = np.random.default_rng(3)
        q, _ = np.linalg.qr(rng.normal(size=(40, 3)) - 0)
        q = q - q.mean(axis=0)
        q, _ = np.linalg.qr(q)
        block = q * np.sqrt(40)
        d = standardize_and_orthonormalize(rng.normal(size=(40, 1)), [block])
        T = d.ortho_maps[0]
        np.testing.assert_allclose(T.T @ T, np.eye(3), atol=1e-10)

    def test_zero_coefficients(self, dataset):
        builder = DesignBuilder(dataset)
        d = builder.build(1.0)
        c = backtransform(np.zeros(d.n_columns), d, builder.bases, dataset.grid)
        assert not np.any(c.beta) and not np.any(c.functions)

    def test_identity_chol_identity_map(self):
        rng = np.random.default_rng(4)
        q, _ = np.linalg.qr(rng.normal(size=(30, 2)))
        block = q - q.mean(axis=0)
        u, s, vt = np.linalg.svd(block, full_matrices=False)
        block = u * np.sqrt(30)  # centered and orthonormal already
        d = standardize_and_orthonormalize(rng.normal(size=(30, 1)), [block])
        theta = np.r_[0.0, 0.3, -0.2]
        c = backtransform(theta, d)
        # equal eigenvalues leave the map determined only up to a rotation
        np.testing.assert_allclose(c.b[0], c.gamma[0])
        assert np.linalg.norm(c.b[0]) == pytest.approx(np.linalg.norm(theta[1:]), rel=1e-10)
