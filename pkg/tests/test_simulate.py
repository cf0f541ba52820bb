import numpy as np
import pytest

from funcox.errors import ConfigurationError
from funcox.simulate import (ReplicateRecord, SimConfig, StudySettings, aggregate,
                             augment_with_pseudo, generate_dataset, legendre_basis,
                             mc_curve_summary, run_mc_study, run_replicate, selection_rates,
                             selection_stability, thread_count, true_functions)

from conftest import small_dataset


class TestGenerator:
    def test_truth(self):
        cfg = SimConfig(n=10)
        assert cfg.grid.size == 101 and cfg.grid[1] == pytest.approx(0.01)
        assert cfg.true_scalar_set.tolist() == [0, 1, 2]
        assert cfg.true_beta.tolist()[:4] == [1.0, 1.5, 2.0, 0.0]
        curves = cfg.true_curves()
        assert curves.shape == (20, 101) and not np.any(curves[5:])
        np.testing.assert_allclose(true_functions([0.5])[:, 0], [0, 4.5, -3.5, -4.0, 0], atol=1e-12)

    def test_legendre_orthonormal(self):
        from numpy.polynomial.legendre import leggauss
        x, w = leggauss(40)
        s = (x + 1) / 2
        P = legendre_basis(s, 20)
        np.testing.assert_allclose((P * w / 2) @ P.T, np.eye(20), atol=1e-12)

    def test_zero_covariates_survival_mean(self):
        cfg = SimConfig(n=10000, mean_censoring=1e12)
        ds, eta = generate_dataset(cfg, 0, zero_covariates=True)
        assert not np.any(eta)
        assert ds.y.mean() == pytest.approx(np.exp(-0.5), rel=0.05)

    def test_censoring_band(self):
        cfg = SimConfig(n=400)
        for r in range(10):
            ds, _ = generate_dataset(cfg, r)
            assert 0.2 <= 1 - ds.delta.mean() <= 0.6

    def test_linear_predictor(self):
        cfg = SimConfig(n=50)
        ds, eta = generate_dataset(cfg, 3)
        manual = ds.scalar[:, :3] @ [1.0, 1.5, 2.0]
        for k in range(5):
            manual += ds.functional[k] @ cfg.true_curves()[k] / 101
        np.testing.assert_allclose(eta, manual, atol=1e-12)

    def test_deterministic_and_independent(self):
        cfg = SimConfig(n=30)
        a, _ = generate_dataset(cfg, 1)
        b, _ = generate_dataset(cfg, 1)
        c, _ = generate_dataset(cfg, 2)
        assert a.y.tobytes() == b.y.tobytes()
        assert a.functional[7].tobytes() == b.functional[7].tobytes()
        assert not np.array_equal(a.y, c.y)

    def test_score_variance(self):
        cfg = SimConfig(n=4000)
        ds, _ = generate_dataset(cfg, 0)
        # curves lie in the span of the basis, so least squares recovers the scores
        P = legendre_basis(cfg.grid, 20)
        scores = np.linalg.lstsq(P.T, ds.functional[0].T, rcond=None)[0].T
        np.testing.assert_allclose(scores[:, :5].var(axis=0), 4 * np.arange(1, 6), rtol=0.1)

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            SimConfig(n=1)
        with pytest.raises(ConfigurationError):
            SimConfig(k_functional=3)
        with pytest.raises(ConfigurationError):
            StudySettings(method="ridge")


class TestMetrics:
    def test_selection_rates(self):
        assert selection_rates([1, 0, 1, 0], [1, 1, 0, 0]) == (0.5, 0.5)

    def test_aggregate_by_hand(self):
        cfg = SimConfig(n=10, n_replicates=2)
        truth = cfg.true_curves()
        recs = []
        for r, shift in enumerate((0.1, -0.3)):
            sel_s = np.zeros(15, bool)
            sel_s[[0, 1, 2, 5 + r]] = True
            sel_g = np.zeros(20, bool)
            sel_g[:5] = True
            beta = cfg.true_beta.copy()
            beta[:3] += shift
            recs.append(ReplicateRecord(r, "", sel_s, sel_g, beta, truth + shift))
        recs.append(ReplicateRecord(2, "NumericalError: boom"))
        m = aggregate(cfg, StudySettings(), recs)
        assert m.n_failed == 1 and m.n_ok == 2
        assert m.tpr["all"] == 1.0
        assert m.fpr["scalar"] == pytest.approx(1 / 12)
        assert m.fpr["all"] == pytest.approx(1 / 27)
        assert m.avg_model_size == 9.0
        np.testing.assert_allclose(m.bias, -0.1)
        np.testing.assert_allclose(m.mse, (0.01 + 0.09) / 2)
        np.testing.assert_allclose(m.mise, (0.01 + 0.09) / 2)
        assert np.all(m.mse >= m.bias ** 2)
        table = mc_curve_summary(m)[0]
        np.testing.assert_allclose(table[:, 2], truth[0] - 0.1)

    def test_thread_count(self, monkeypatch):
        monkeypatch.setenv("FUNCOX_THREADS", "3")
        assert thread_count() == 3
        assert thread_count(2) == 2
        monkeypatch.setenv("FUNCOX_THREADS", "x")
        with pytest.raises(ConfigurationError):
            thread_count()


class TestStudy:
    def test_small_study_reproducible(self):
        cfg = SimConfig(n=200, n_replicates=2)
        st = StudySettings(psi_grid=(1.0,), n_lambda=20)
        a = run_mc_study(cfg, st, threads=1)
        b = run_mc_study(cfg, st, threads=2)
        assert a.summary() == b.summary()
        np.testing.assert_array_equal(a.mise, b.mise)
        assert 0 <= a.fpr["all"] <= 1 and a.avg_model_size >= 0

    def test_typical_replicate_selects_truth(self):
        cfg = SimConfig(n=200)
        hits = 0
        for r in range(6):
            rec = run_replicate(cfg, StudySettings(), r)
            hits += bool(rec.selected_scalars[:3].all() and rec.selected_groups[:5].all())
        assert hits >= 4


class TestStability:
    def test_augment(self, dataset):
        aug = augment_with_pseudo(dataset, 3, 0)
        assert aug.k == dataset.k + 3
        assert aug.functional_names[-3:] == ["pseudo13", "pseudo14", "pseudo15"]
        assert augment_with_pseudo(dataset, 0, 0) is dataset

    def test_single_run_and_no_pseudo(self):
        ds = small_dataset(n=150, seed=0)
        st = StudySettings(psi_grid=(1.0,), n_lambda=15)
        res = selection_stability(ds, 0, 1, 0, st, threads=1)
        assert len(res.names) == ds.p + ds.k
        assert set(np.unique(res.percentages)) <= {0.0, 100.0}
        res2 = selection_stability(ds, 2, 2, 0, st, threads=1)
        assert res2.kinds[-2:] == ["pseudo", "pseudo"] and res2.n_failed == 0
        with pytest.raises(ConfigurationError):
            selection_stability(ds, 1, 0)
