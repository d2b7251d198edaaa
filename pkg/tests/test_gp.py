import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    dense_elbo,
    dense_kl_terms,
    dense_lml,
    dense_nystrom,
    dense_posterior,
    random_instance,
    se_gram,
)
from sparq_bandit import gp
from sparq_bandit.gp import HeteroscedasticDataset, NumericalError
from sparq_bandit.kernel import KernelSpec, kernel_matrix

SE = KernelSpec("se", 1.0, 1.0)


def _data(X, y, noise):
    return HeteroscedasticDataset(X, y, noise)


class TestDataset:
    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length mismatch"):
            HeteroscedasticDataset([[0.0], [1.0]], [1.0], [0.1, 0.1])

    @pytest.mark.parametrize("noise", [0.0, -1.0, float("nan")])
    def test_noise_positive(self, noise):
        with pytest.raises(ValueError):
            HeteroscedasticDataset([[0.0]], [1.0], [noise])

    def test_subset(self):
        d = HeteroscedasticDataset([[0.0], [1.0], [2.0]], [1, 2, 3], [0.1, 0.2, 0.3])
        s = d.subset([2, 0])
        np.testing.assert_array_equal(s.values, [3, 1])
        np.testing.assert_array_equal(s.noise_variances, [0.3, 0.1])


class TestFit:
    def test_empty_is_prior(self):
        post = gp.fit(KernelSpec("se", 1.0, 2.5), HeteroscedasticDataset.empty(1))
        mean, var = post.predict(np.linspace(-3, 3, 7))
        np.testing.assert_array_equal(mean, 0.0)
        np.testing.assert_array_equal(var, 2.5)

    def test_one_point_closed_form(self):
        post = gp.fit(SE, _data([[0.0]], [1.0], [1.0]))
        assert gp.posterior_mean(post, [0.0]) == pytest.approx(0.5, abs=1e-12)
        assert gp.posterior_variance(post, [0.0]) == pytest.approx(0.5, abs=1e-12)

    def test_dense_oracle_n10(self):
        rng = np.random.default_rng(10)
        X, y, noise = random_instance(rng, 10, 2)
        Xq = rng.uniform(-3, 3, size=(15, 2))
        mean, var = gp.fit(SE, _data(X, y, noise)).predict(Xq)
        m_ref, v_ref = dense_posterior(X, y, noise, Xq, 1.0, 1.0)
        np.testing.assert_allclose(mean, m_ref, rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(var, v_ref, rtol=1e-8, atol=1e-12)

    def test_factor_reconstructs(self):
        rng = np.random.default_rng(3)
        X, y, noise = random_instance(rng, 12, 1)
        post = gp.fit(SE, _data(X, y, noise))
        A = kernel_matrix(SE, X) + np.diag(noise)
        err = np.linalg.norm(post.factor @ post.factor.T - A) / np.linalg.norm(A)
        assert err < 1e-8

    def test_interpolates_at_low_noise(self):
        X = np.array([[-1.0], [0.0], [2.0]])
        y = np.array([0.3, -0.7, 1.1])
        post = gp.fit(SE, _data(X, y, np.full(3, 1e-8)))
        for x, v in zip(X, y):
            assert gp.posterior_mean(post, x) == pytest.approx(v, abs=1e-6)

    def test_duplicates_need_jitter_free(self):
        X = np.zeros((5, 1))
        post = gp.fit(SE, _data(X, np.ones(5), np.full(5, 1e-3)))
        assert post.jitter == 0.0
        assert gp.posterior_mean(post, [0.0]) == pytest.approx(5 / (5 + 1e-3), rel=1e-9)

    def test_numerical_error_carries_levels(self):
        with pytest.raises(NumericalError) as info:
            gp.stable_cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]), 1.0)
        assert info.value.jitter_levels == (0.0, *gp.JITTER_LEVELS)

    def test_jitter_escalates(self):
        L, jitter = gp.stable_cholesky(np.eye(3), 2.0)
        assert jitter == 0.0
        # rank one: needs the first rung
        A = np.ones((3, 3))
        L, jitter = gp.stable_cholesky(A, 2.0)
        assert jitter == 2.0 * gp.JITTER_LEVELS[0]
        np.testing.assert_allclose(L @ L.T, A + jitter * np.eye(3), atol=1e-12)
        # slightly indefinite: skips to the second rung
        A = np.ones((3, 3)) - 5e-9 * np.eye(3)
        _, jitter = gp.stable_cholesky(A, 1.0)
        assert jitter == gp.JITTER_LEVELS[1]

    def test_homoscedastic_special_case(self):
        rng = np.random.default_rng(4)
        X = rng.uniform(-2, 2, size=(8, 1))
        y = rng.normal(size=8)
        post = gp.fit(SE, HeteroscedasticDataset.homoscedastic(X, y, 0.05))
        K = se_gram(X, 1.0, 1.0)
        Xq = np.array([[0.25]])
        k = np.array([math.exp(-0.5 * (x[0] - 0.25) ** 2) for x in X])
        inv = np.linalg.inv(K + 0.05 * np.eye(8))
        assert gp.posterior_mean(post, Xq[0]) == pytest.approx(k @ inv @ y, rel=1e-9)
        assert gp.posterior_variance(post, Xq[0]) == pytest.approx(1 - k @ inv @ k, rel=1e-8)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 15), st.integers(1, 3), st.integers(0, 2**32 - 1))
    def test_variance_range(self, n, d, seed):
        rng = np.random.default_rng(seed)
        X, y, noise = random_instance(rng, n, d, (1e-6, 1.0))
        spec = KernelSpec("matern52", 0.8, 1.7)
        _, var = gp.fit(spec, _data(X, y, noise)).predict(rng.uniform(-3, 3, size=(20, d)))
        assert np.all(var >= 0.0)
        assert np.all(var <= spec.signal_variance)


class TestMarginalLikelihood:
    def test_scalar(self):
        val = gp.log_marginal_likelihood(SE, _data([[0.0]], [0.0], [1.0]))
        assert val == pytest.approx(-0.5 * math.log(2 * math.pi * 2), abs=1e-12)
        assert val == pytest.approx(-1.26551, abs=1e-5)

    def test_dense_n8(self):
        X, y, noise = random_instance(np.random.default_rng(8), 8, 2)
        val = gp.log_marginal_likelihood(SE, _data(X, y, noise))
        assert val == pytest.approx(dense_lml(X, y, noise, 1.0, 1.0), rel=1e-8)

    def test_permutation_invariant(self):
        X, y, noise = random_instance(np.random.default_rng(9), 9, 1)
        perm = np.random.default_rng(0).permutation(9)
        a = gp.log_marginal_likelihood(SE, _data(X, y, noise))
        b = gp.log_marginal_likelihood(SE, _data(X[perm], y[perm], noise[perm]))
        assert a == pytest.approx(b, rel=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            gp.log_marginal_likelihood(SE, HeteroscedasticDataset.empty(1))


class TestNystrom:
    def test_full_set_recovers_k(self):
        X = np.random.default_rng(0).uniform(-3, 3, size=(6, 1))
        np.testing.assert_allclose(gp.nystrom_matrix(SE, X, X), kernel_matrix(SE, X), atol=1e-8)

    def test_rank_one(self):
        X = np.array([[0.0], [0.7], [-1.2], [2.0]])
        Q = gp.nystrom_matrix(SE, X, X[:1])
        k = kernel_matrix(SE, X)[:, 0]
        np.testing.assert_allclose(Q, np.outer(k, k) / 1.0, rtol=1e-12)

    def test_residual_diagonal(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            X = rng.uniform(-3, 3, size=(10, 2))
            Q = gp.nystrom_matrix(SE, X, X[rng.choice(10, 3, replace=False)])
            assert np.all(np.diag(kernel_matrix(SE, X) - Q) >= -1e-9)
            assert np.linalg.eigvalsh(kernel_matrix(SE, X) - Q).min() >= -1e-8

    def test_matches_dense(self):
        rng = np.random.default_rng(12)
        X = rng.uniform(-3, 3, size=(7, 1))
        Xs = X[[1, 4]]
        np.testing.assert_allclose(gp.nystrom_matrix(SE, X, Xs), dense_nystrom(X, Xs, 1.0, 1.0), atol=1e-10)

    def test_empty_inducing(self):
        with pytest.raises(ValueError):
            gp.nystrom_matrix(SE, [[0.0]], np.zeros((0, 1)))


class TestElbo:
    def _instance(self, seed, n=5):
        X, y, noise = random_instance(np.random.default_rng(seed), n, 1)
        return X, y, noise, _data(X, y, noise)

    def test_equality_at_full_set(self):
        X, y, noise, data = self._instance(0, 7)
        assert gp.elbo(SE, data, X) == pytest.approx(gp.log_marginal_likelihood(SE, data), abs=1e-8)
        assert abs(gp.kl_gap(SE, data, X)) < 1e-8
        assert gp.kl_trace_bound(SE, data, X, 0.01) < 1e-8

    def test_rank_one_dense(self):
        X, y, noise, data = self._instance(1)
        assert gp.elbo(SE, data, X[:1]) == pytest.approx(dense_elbo(X, y, noise, X[:1], 1.0, 1.0), abs=1e-8)

    def test_lower_bound(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            n = int(rng.integers(2, 12))
            X, y, noise = random_instance(rng, n, 2)
            data = _data(X, y, noise)
            Xs = X[rng.choice(n, int(rng.integers(1, n + 1)), replace=False)]
            assert gp.elbo(SE, data, Xs) <= gp.log_marginal_likelihood(SE, data) + 1e-8

    def test_gap_term_by_term(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            X, y, noise = random_instance(rng, 6, 1)
            Xs = X[:2]
            ratio, trace = dense_kl_terms(X, y, noise, Xs, 1.0, 1.0)
            assert gp.kl_gap(SE, _data(X, y, noise), Xs) == pytest.approx(ratio + trace, abs=1e-8)

    def test_gap_monotone_in_inducing_set(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            X, y, noise = random_instance(rng, 8, 1)
            data = _data(X, y, noise)
            order = rng.permutation(8)
            gaps = [gp.kl_gap(SE, data, X[order[:m]]) for m in range(1, 9)]
            assert all(b <= a + 1e-8 for a, b in zip(gaps, gaps[1:]))
            assert min(gaps) >= -1e-8

    def test_trace_bound_rank_one(self):
        X = np.array([[0.0], [1.0], [3.0]])
        data = _data(X, np.zeros(3), np.full(3, 0.5))
        k = np.array([1.0, math.exp(-0.5), math.exp(-4.5)])
        expected = float(np.sum(1.0 - k**2)) / 0.5
        assert gp.kl_trace_bound(SE, data, X[:1], 0.5) == pytest.approx(expected, rel=1e-10)

    def test_trace_bound_dominates_marginal_term(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            X, y, noise = random_instance(rng, 9, 1, (0.01, 0.5))
            data = _data(X, y, noise)
            Xs = X[rng.choice(9, 3, replace=False)]
            assert gp.kl_trace_bound(SE, data, Xs, noise.min()) >= gp.marginal_kl_bound(SE, data, Xs) - 1e-10

    def test_sigma2_positive(self):
        X, y, noise, data = self._instance(6)
        with pytest.raises(ValueError):
            gp.kl_trace_bound(SE, data, X, 0.0)


class TestTuning:
    def test_single_candidate(self):
        spec = KernelSpec("matern52", 3.0, 0.5)
        data = _data([[0.0], [1.0]], [0.1, 0.2], [0.1, 0.1])
        assert gp.tune_hyperparameters(data, [spec]) is spec

    def test_ties_to_earliest(self):
        data = _data([[0.0]], [0.0], [1.0])
        a, b = KernelSpec("se", 1.0, 1.0), KernelSpec("se", 5.0, 1.0)
        # a single observation does not depend on the lengthscale
        assert gp.tune_hyperparameters(data, [b, a]) is b

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            gp.tune_hyperparameters(_data([[0.0]], [0.0], [1.0]), [])

    def test_recovers_lengthscale(self):
        grid = [KernelSpec("se", ell, 1.0) for ell in (0.5, 1.0, 2.0, 4.0)]
        true = KernelSpec("se", 2.0, 1.0)
        hits = 0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            X = rng.uniform(0, 20, size=(50, 1))
            C = kernel_matrix(true, X) + 0.01 * np.eye(50)
            y = np.linalg.cholesky(C) @ rng.standard_normal(50)
            hits += gp.tune_hyperparameters(HeteroscedasticDataset.homoscedastic(X, y, 0.01), grid) == true
        assert hits >= 40

    def test_grid_permutation(self):
        rng = np.random.default_rng(7)
        X = rng.uniform(0, 10, size=(30, 1))
        y = np.sin(X[:, 0]) + 0.1 * rng.standard_normal(30)
        data = HeteroscedasticDataset.homoscedastic(X, y, 0.01)
        grid = gp.default_grid()
        winner = gp.tune_hyperparameters(data, grid)
        for perm in itertools.islice(itertools.permutations(range(len(grid))), 0, 5000, 997):
            assert gp.tune_hyperparameters(data, [grid[i] for i in perm]) == winner

    def test_default_grid(self):
        grid = gp.default_grid()
        assert len(grid) == 15
        assert {s.lengthscale for s in grid} == {0.5, 1.0, 2.0, 4.0, 8.0}
        assert {s.signal_variance for s in grid} == {0.25, 1.0, 4.0}
