import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treelso import metrics
from treelso.errors import InvalidInputError, NumericalDomainError
from treelso.metrics import GaussianSummary, frechet_distance, gaussian_fit


def random_summary(rng, d, rank=None):
    A = rng.normal(size=(d, rank or d))
    return GaussianSummary(rng.normal(size=d), A @ A.T)


class TestGaussianFit:
    def test_identical_vectors(self):
        g = gaussian_fit([[1.0, 2.0], [1.0, 2.0]])
        np.testing.assert_array_equal(g.covariance, np.zeros((2, 2)))

    def test_one_dimensional(self):
        g = gaussian_fit([[0.0], [2.0]])
        assert g.mean[0] == 1.0 and g.covariance[0, 0] == 2.0

    def test_permutation_invariant(self, rng):
        X = rng.normal(size=(30, 4))
        a, b = gaussian_fit(X), gaussian_fit(X[rng.permutation(30)])
        np.testing.assert_allclose(a.mean, b.mean, atol=1e-15)
        np.testing.assert_allclose(a.covariance, b.covariance, atol=1e-14)

    def test_symmetric(self, rng):
        cov = gaussian_fit(rng.normal(size=(10, 6))).covariance
        np.testing.assert_array_equal(cov, cov.T)

    def test_too_few(self):
        with pytest.raises(InvalidInputError):
            gaussian_fit([[1.0, 2.0]])


class TestFrechet:
    def test_identical(self, rng):
        g = random_summary(rng, 5)
        assert abs(frechet_distance(g, g)) < 1e-8

    def test_one_dimensional(self):
        d = frechet_distance(GaussianSummary(np.zeros(1), np.eye(1)), GaussianSummary(np.ones(1), np.eye(1)))
        assert abs(d - 1.0) < 1e-8

    def test_diagonal_three_d(self):
        a = GaussianSummary(np.array([1.0, 0, 0]), np.diag([1.0, 4.0, 9.0]))
        b = GaussianSummary(np.zeros(3), np.eye(3))
        assert abs(frechet_distance(a, b) - 6.0) < 1e-8

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_commuting_closed_form(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 8))
        Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        lam, nu = rng.uniform(0, 5, size=d), rng.uniform(0, 5, size=d)
        mu1, mu2 = rng.normal(size=d), rng.normal(size=d)
        a = GaussianSummary(mu1, (Q * lam) @ Q.T)
        b = GaussianSummary(mu2, (Q * nu) @ Q.T)
        expected = np.sum((mu1 - mu2) ** 2) + np.sum((np.sqrt(lam) - np.sqrt(nu)) ** 2)
        assert abs(frechet_distance(a, b) - expected) < 1e-8

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_symmetric_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 10))
        a = random_summary(rng, d, rank=int(rng.integers(1, d + 1)))
        b = random_summary(rng, d)
        ab, ba = frechet_distance(a, b), frechet_distance(b, a)
        assert ab >= -1e-6
        assert abs(ab - ba) <= 1e-6 * max(1.0, ab)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(InvalidInputError):
            frechet_distance(random_summary(rng, 2), random_summary(rng, 3))

    def test_indefinite(self):
        bad = GaussianSummary(np.zeros(2), np.diag([1.0, -1.0]))
        with pytest.raises(NumericalDomainError):
            frechet_distance(bad, GaussianSummary(np.zeros(2), np.eye(2)))

    def test_tiny_negative_clamped(self):
        cov = np.diag([1.0, -1e-9])
        assert frechet_distance(GaussianSummary(np.zeros(2), cov), GaussianSummary(np.zeros(2), cov)) < 1e-8


class TestFidLike:
    def test_same_set(self, rng):
        imgs = rng.random((20, 16, 16, 1))
        assert abs(metrics.fid_like(imgs, imgs)) < 1e-8

    def test_constant_sets(self, rng):
        a = rng.normal(0, 1e-3, size=(200, 16, 16, 1))
        b = 1.0 + rng.normal(0, 1e-3, size=(200, 16, 16, 1))
        assert metrics.fid_like(a, b, "flatten") == pytest.approx(256, rel=0.01)

    def test_both_maps_non_negative(self, rng):
        a, b = rng.random((30, 16, 16, 1)), rng.random((30, 16, 16, 1)) ** 2
        assert metrics.fid_like(a, b, "flatten") >= 0
        assert metrics.fid_like(a, b, "downsample4") >= 0

    def test_downsample(self):
        x = np.arange(256, dtype=float).reshape(1, 16, 16, 1)
        f = metrics.downsample4(x)
        assert f.shape == (1, 16)
        assert f[0, 0] == np.mean(x[0, :4, :4, 0])

    def test_metric_csv(self):
        text = metrics.metric_csv([("fid_like", "a", "b", "flatten", 0.5)])
        assert text == "metric,set_a,set_b,feature_map,value\nfid_like,a,b,flatten,0.5\n"
