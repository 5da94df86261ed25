import io
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ortho_group

from morecl.distance import (CoefficientConfig, EmptyClassError, TaskStats, class_covariance, class_mean,
                             coefficient, compute_stats, mahalanobis, regularized_inverse, task_covariance)
from oracles import gauss_jordan_inverse, mahalanobis_explicit


def _stats(means, S_inv=None):
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    d = means.shape[1]
    S_inv = np.eye(d) if S_inv is None else S_inv
    return TaskStats(0, list(range(len(means))), means, np.eye(d), S_inv)


class TestMean:
    def test_two_points(self):
        np.testing.assert_array_equal(class_mean([[0, 0], [2, 0]]), [1, 0])

    def test_single_point(self):
        np.testing.assert_array_equal(class_mean([[3.5, -1.0]]), [3.5, -1.0])

    def test_column_mean_oracle(self):
        Z = np.random.default_rng(0).normal(size=(50, 4))
        ref = [sum(Z[i, j] for i in range(50)) / 50 for j in range(4)]
        np.testing.assert_allclose(class_mean(Z), ref, atol=1e-12, rtol=0)

    def test_empty(self):
        with pytest.raises(EmptyClassError):
            class_mean(np.zeros((0, 3)))


class TestCovariance:
    def test_two_point_biased(self):
        np.testing.assert_array_equal(class_covariance([[0, 0], [2, 0]]), [[1, 0], [0, 0]])

    def test_average_over_classes(self):
        S = task_covariance([np.array([[0, 0], [2, 0]]), np.array([[0, 0], [0, 2]])])
        np.testing.assert_array_equal(S, [[0.5, 0], [0, 0.5]])

    def test_outer_product_oracle(self):
        rng = np.random.default_rng(1)
        groups = [rng.normal(size=(n, 5)) for n in (7, 12, 30)]
        per = []
        for Z in groups:
            mu = [sum(col) / len(Z) for col in Z.T]
            acc = np.zeros((5, 5))
            for z in Z:
                dz = [a - b for a, b in zip(z, mu)]
                acc += np.array([[p * q for q in dz] for p in dz])
            per.append(acc / len(Z))
        np.testing.assert_allclose(task_covariance(groups), sum(per) / 3, atol=1e-10, rtol=0)

    def test_regularized_inverse_of_singular(self):
        S = np.array([[1.0, 0.0], [0.0, 0.0]])
        inv = regularized_inverse(S)
        ridge = 1e-6 * 0.5
        np.testing.assert_allclose(inv, np.diag([1 / (1 + ridge), 1 / ridge]), rtol=1e-12)

    def test_compute_stats_shapes(self):
        rng = np.random.default_rng(2)
        Z = rng.normal(size=(40, 3))
        y = np.repeat([5, 9], 20)
        st_ = compute_stats(1, Z, y, [5, 9])
        assert st_.means.shape == (2, 3) and st_.classes == [5, 9]
        np.testing.assert_allclose(st_.cov, st_.cov.T, atol=0)
        assert np.all(np.linalg.eigvalsh(st_.cov + 1e-6 * np.trace(st_.cov) / 3 * np.eye(3)) > 0)
        with pytest.raises(EmptyClassError):
            compute_stats(1, Z, y, [5, 9, 11])

    def test_stats_round_trip(self):
        rng = np.random.default_rng(3)
        s = compute_stats(2, rng.normal(size=(30, 4)), np.repeat([0, 1, 2], 10), [0, 1, 2])
        buf = io.BytesIO()
        s.write(buf)
        buf.seek(0)
        back = TaskStats.read(buf)
        for a in ("means", "cov", "cov_inv"):
            assert getattr(back, a).tobytes() == getattr(s, a).tobytes()
        assert (back.task, back.classes) == (2, [0, 1, 2])


class TestMahalanobis:
    def test_zero_displacement(self):
        assert mahalanobis([1.0, 2.0], [1.0, 2.0], np.array([[2.0, 0.3], [0.3, 1.0]])) == 0.0

    def test_euclidean(self):
        assert mahalanobis([3.0, 4.0], [0.0, 0.0], np.eye(2)) == 5.0

    def test_gauss_jordan_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            d = int(rng.integers(1, 9))
            A = rng.normal(size=(d, d))
            S = A @ A.T + 0.1 * np.eye(d)
            z, mu = rng.normal(size=d), rng.normal(size=d)
            ref = mahalanobis_explicit(z, mu, gauss_jordan_inverse(S.tolist()).tolist())
            assert abs(mahalanobis(z, mu, np.linalg.inv(S)) - ref) < 1e-8

    def test_negative_form_clamped(self):
        with pytest.warns(RuntimeWarning):
            assert mahalanobis([1.0], [0.0], np.array([[-1.0]])) == 0.0

    def test_batched(self):
        Z = np.array([[3.0, 4.0], [0.0, 1.0]])
        np.testing.assert_array_equal(mahalanobis(Z, [0, 0], np.eye(2)), [5.0, 1.0])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 6))
    def test_rotation_invariance(self, seed, d):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(d, d))
        S = A @ A.T + np.eye(d)
        z, mu = rng.normal(size=d), rng.normal(size=d)
        Q = ortho_group.rvs(d, random_state=seed)
        base = mahalanobis(z, mu, np.linalg.inv(S))
        rot = mahalanobis(Q @ z, Q @ mu, np.linalg.inv(Q @ S @ Q.T))
        assert abs(base - rot) < 1e-8 * max(1.0, base)


class TestCoefficient:
    def test_single_class(self):
        assert coefficient([3.0, 4.0], _stats([[0, 0]])) == 4.0

    def test_max_rule(self):
        assert coefficient([0.0, 0.0], _stats([[3, 4], [0, 2]])) == 10.0

    def test_floor(self):
        cfg = CoefficientConfig(c=20, md_floor=1e-12)
        assert coefficient([1.0, 1.0], _stats([[1, 1], [5, 5]]), cfg) == 20 / 1e-12

    def test_squared(self):
        assert coefficient([3.0, 4.0], _stats([[0, 0]]), CoefficientConfig(squared=True)) == 20 / 25

    def test_config_validation(self):
        with pytest.raises(ValueError):
            CoefficientConfig(c=0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1.01, 5.0))
    def test_anti_monotone(self, seed, factor):
        rng = np.random.default_rng(seed)
        means = rng.normal(size=(3, 4))
        z = rng.normal(size=4) * 3
        # scaling every displacement from z pushes every class farther away
        far = z + factor * (means - z)
        assert coefficient(z, _stats(far)) < coefficient(z, _stats(means))
        assert coefficient(z, _stats(means)) > 0
