"""Heteroscedastic Gaussian-process regression and sparse-inference diagnostics.

Every observation carries its own noise variance, so the noise covariance is
a diagonal ``Sigma``.  All solves go through a lower Cholesky factor of
``K + Sigma``; the diagnostics (ELBO, KL gap, trace bounds) are evaluated
densely and are meant for small problems.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .kernel import KernelSpec, as_point, as_points, cross_matrix, kernel_matrix

JITTER_LEVELS = (1e-10, 1e-8, 1e-6)

_LOG_2PI = np.log(2.0 * np.pi)


class NumericalError(RuntimeError):
    """A factorization failed even after jitter escalation."""

    def __init__(self, message: str, jitter_levels: Sequence[float] = ()):
        super().__init__(message)
        self.jitter_levels = tuple(jitter_levels)


@dataclass(frozen=True)
class HeteroscedasticDataset:
    """Observed locations, values and per-observation noise variances."""

    locations: np.ndarray
    values: np.ndarray
    noise_variances: np.ndarray

    def __post_init__(self):
        X = as_points(self.locations)
        y = np.asarray(self.values, dtype=float).reshape(-1)
        s = np.asarray(self.noise_variances, dtype=float).reshape(-1)
        if not (X.shape[0] == y.shape[0] == s.shape[0]):
            raise ValueError(
                f"length mismatch: {X.shape[0]} locations, {y.shape[0]} values, {s.shape[0]} noise variances"
            )
        if np.any(~(s > 0)):
            raise ValueError("noise variances must be strictly positive")
        object.__setattr__(self, "locations", X)
        object.__setattr__(self, "values", y)
        object.__setattr__(self, "noise_variances", s)

    def __len__(self):
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.locations.shape[1]

    @classmethod
    def empty(cls, d: int = 1) -> "HeteroscedasticDataset":
        return cls(np.zeros((0, d)), np.zeros(0), np.zeros(0))

    @classmethod
    def homoscedastic(cls, locations, values, noise_variance: float) -> "HeteroscedasticDataset":
        y = np.asarray(values, dtype=float).reshape(-1)
        return cls(locations, y, np.full(y.shape[0], float(noise_variance)))

    def subset(self, idx) -> "HeteroscedasticDataset":
        idx = np.asarray(idx, dtype=int)
        return HeteroscedasticDataset(self.locations[idx], self.values[idx], self.noise_variances[idx])


def stable_cholesky(A: np.ndarray, scale: float) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``A + jitter * scale * I``.

    The plain factorization is tried first; on failure the jitter escalates
    through ``JITTER_LEVELS``. Returns the factor and the absolute jitter that
    was added (0 when none was needed).
    """
    n = A.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    tried = []
    for level in (0.0, *JITTER_LEVELS):
        jitter = level * scale
        tried.append(jitter)
        try:
            L = np.linalg.cholesky(A + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return L, jitter
    raise NumericalError(f"Cholesky factorization of a {n}x{n} matrix failed", tried)


@dataclass(frozen=True)
class GPPosterior:
    """Fitted heteroscedastic GP.

    ``gram`` is the prior covariance between training inputs (the plain
    kernel matrix, or a spatio-temporal one). ``cross_scale``, when set,
    multiplies the cross-covariance between each training point and any
    query, which is how a time-decayed kernel is evaluated at a fixed query
    time.
    """

    spec: KernelSpec
    dataset: HeteroscedasticDataset
    gram: np.ndarray
    factor: np.ndarray
    weights: np.ndarray
    jitter: float = 0.0
    cross_scale: np.ndarray | None = None
    stats: dict = field(default_factory=lambda: {"variance_clamps": 0}, compare=False)

    @property
    def n(self) -> int:
        return len(self.dataset)

    def cross(self, Xq) -> np.ndarray:
        Kq = cross_matrix(self.spec, self.dataset.locations, Xq)
        if self.cross_scale is not None:
            Kq = Kq * self.cross_scale[:, None]
        return Kq

    def predict(self, Xq) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at each row of ``Xq``.

        Negative variances from round-off are clamped to 0; the number of
        clamped entries is accumulated in ``stats["variance_clamps"]``.
        """
        Xq = as_points(Xq, self.dataset.dim)
        prior = np.full(Xq.shape[0], self.spec.signal_variance)
        if self.n == 0:
            return np.zeros(Xq.shape[0]), prior
        Kq = self.cross(Xq)
        mean = Kq.T @ self.weights
        V = solve_triangular(self.factor, Kq, lower=True, check_finite=False)
        var = prior - np.einsum("ij,ij->j", V, V)
        neg = var < 0
        if np.any(neg):
            self.stats["variance_clamps"] += int(neg.sum())
            var = np.where(neg, 0.0, var)
        return mean, var


def _fit(spec, data, gram, cross_scale=None) -> GPPosterior:
    n = len(data)
    if n == 0:
        return GPPosterior(spec, data, np.zeros((0, 0)), np.zeros((0, 0)), np.zeros(0))
    A = gram + np.diag(data.noise_variances)
    L, jitter = stable_cholesky(A, spec.signal_variance)
    w = cho_solve((L, True), data.values, check_finite=False)
    return GPPosterior(spec, data, gram, L, w, jitter, cross_scale)


def fit(spec: KernelSpec, data: HeteroscedasticDataset) -> GPPosterior:
    """Condition the GP prior on a heteroscedastic dataset."""
    return _fit(spec, data, kernel_matrix(spec, data.locations))


def fit_with_gram(spec: KernelSpec, data: HeteroscedasticDataset, gram: np.ndarray,
                  cross_scale: np.ndarray | None = None) -> GPPosterior:
    """Condition on ``data`` using a caller-supplied prior Gram matrix."""
    gram = np.asarray(gram, dtype=float)
    if gram.shape != (len(data), len(data)):
        raise ValueError(f"gram shape {gram.shape} does not match {len(data)} observations")
    if cross_scale is not None:
        cross_scale = np.asarray(cross_scale, dtype=float)
    return _fit(spec, data, gram, cross_scale)


def posterior_mean(post: GPPosterior, x) -> float:
    x = as_point(x, post.dataset.dim)
    return float(post.predict(x[None, :])[0][0])


def posterior_variance(post: GPPosterior, x) -> float:
    x = as_point(x, post.dataset.dim)
    return float(post.predict(x[None, :])[1][0])


def log_marginal_likelihood(spec: KernelSpec, data: HeteroscedasticDataset) -> float:
    """``log N(y | 0, K + Sigma)``."""
    if len(data) == 0:
        raise ValueError("log marginal likelihood needs at least one observation")
    post = fit(spec, data)
    return _gaussian_logpdf_from_factor(data.values, post.factor)


def _gaussian_logpdf_from_factor(y, L) -> float:
    alpha = solve_triangular(L, y, lower=True, check_finite=False)
    return float(-0.5 * alpha @ alpha - np.log(np.diag(L)).sum() - 0.5 * y.shape[0] * _LOG_2PI)


def gaussian_logpdf(y, cov: np.ndarray, scale: float = 1.0) -> float:
    """Zero-mean multivariate normal log-density via a jittered Cholesky."""
    y = np.asarray(y, dtype=float)
    L, _ = stable_cholesky(cov, scale)
    return _gaussian_logpdf_from_factor(y, L)


def nystrom_matrix(spec: KernelSpec, X, Xs) -> np.ndarray:
    """Low-rank approximation ``K_{n*} K_{**}^{-1} K_{*n}``."""
    X = as_points(X)
    Xs = as_points(Xs, X.shape[1])
    if Xs.shape[0] == 0:
        raise ValueError("at least one inducing point is required")
    Kss = kernel_matrix(spec, Xs)
    Lss, _ = stable_cholesky(Kss, spec.signal_variance)
    Kns = cross_matrix(spec, X, Xs)
    V = solve_triangular(Lss, Kns.T, lower=True, check_finite=False)
    Q = V.T @ V
    return 0.5 * (Q + Q.T)


def elbo(spec: KernelSpec, data: HeteroscedasticDataset, Xs) -> float:
    """Collapsed evidence lower bound with a diagonal heteroscedastic noise.

    ``log N(y | 0, Sigma + Q) - tr(Sigma^{-1} (K - Q)) / 2``.
    """
    if len(data) == 0:
        raise ValueError("elbo needs at least one observation")
    K = kernel_matrix(spec, data.locations)
    Q = nystrom_matrix(spec, data.locations, Xs)
    s = data.noise_variances
    fit_term = gaussian_logpdf(data.values, Q + np.diag(s), spec.signal_variance)
    return fit_term - 0.5 * float(np.sum(np.diag(K - Q) / s))


def kl_gap(spec: KernelSpec, data: HeteroscedasticDataset, Xs) -> float:
    """``log p(y) - elbo``, the KL divergence from the sparse to the exact posterior."""
    return log_marginal_likelihood(spec, data) - elbo(spec, data, Xs)


def kl_trace_bound(spec: KernelSpec, data: HeteroscedasticDataset, Xs, sigma2: float) -> float:
    """Upper bound ``tr(K - Q) / sigma2`` on the conditional expected KL."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    K = kernel_matrix(spec, data.locations)
    Q = nystrom_matrix(spec, data.locations, Xs)
    return max(float(np.trace(K - Q)) / sigma2, 0.0)


def marginal_kl_bound(spec: KernelSpec, data: HeteroscedasticDataset, Xs) -> float:
    """``tr((Q + Sigma)^{-1} (K - Q)) / 2``, the bound on the Gaussian-marginal KL term."""
    K = kernel_matrix(spec, data.locations)
    Q = nystrom_matrix(spec, data.locations, Xs)
    L, _ = stable_cholesky(Q + np.diag(data.noise_variances), spec.signal_variance)
    return 0.5 * float(np.trace(cho_solve((L, True), K - Q, check_finite=False)))


def sparse_predict(spec: KernelSpec, data: HeteroscedasticDataset, Xs, Xq) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of the optimal variational posterior with inducing inputs ``Xs``.

    With ``A = K_ss + K_sn Sigma^{-1} K_ns`` the mean is
    ``K_qs A^{-1} K_sn Sigma^{-1} y`` and the variance
    ``k_qq - K_qs K_ss^{-1} K_sq + K_qs A^{-1} K_sq``.  This is the process
    whose KL divergence to the exact posterior equals :func:`kl_gap`.
    """
    X = data.locations
    Xs = as_points(Xs, data.dim)
    Xq = as_points(Xq, data.dim)
    if Xs.shape[0] == 0:
        raise ValueError("at least one inducing point is required")
    Kss = kernel_matrix(spec, Xs)
    Ksn = cross_matrix(spec, Xs, X)
    Ksq = cross_matrix(spec, Xs, Xq)
    inv_noise = 1.0 / data.noise_variances
    A = Kss + (Ksn * inv_noise) @ Ksn.T
    La, _ = stable_cholesky(0.5 * (A + A.T), spec.signal_variance)
    Ls, _ = stable_cholesky(Kss, spec.signal_variance)
    mean = Ksq.T @ cho_solve((La, True), Ksn @ (inv_noise * data.values), check_finite=False)
    Va = solve_triangular(La, Ksq, lower=True, check_finite=False)
    Vs = solve_triangular(Ls, Ksq, lower=True, check_finite=False)
    var = spec.signal_variance - np.einsum("ij,ij->j", Vs, Vs) + np.einsum("ij,ij->j", Va, Va)
    return mean, np.maximum(var, 0.0)


def default_grid(family: str = "se", lengthscales=(0.5, 1.0, 2.0, 4.0, 8.0),
                 signal_variances=(0.25, 1.0, 4.0)) -> list[KernelSpec]:
    return [KernelSpec(family, float(l), float(v)) for l in lengthscales for v in signal_variances]


def tune_hyperparameters(data: HeteroscedasticDataset, grid: Sequence[KernelSpec]) -> KernelSpec:
    """Grid-search the kernel maximizing the log marginal likelihood.

    Ties go to the earliest grid entry. Candidates whose factorization fails
    are skipped.
    """
    if len(grid) == 0:
        raise ValueError("hyperparameter grid is empty")
    best, best_lml = None, -np.inf
    for spec in grid:
        try:
            lml = log_marginal_likelihood(spec, data)
        except NumericalError:
            continue
        if best is None or lml > best_lml:
            best, best_lml = spec, lml
    if best is None:
        raise NumericalError("every candidate kernel failed to factorize", JITTER_LEVELS)
    return best
