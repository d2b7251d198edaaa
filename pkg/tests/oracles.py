"""Independent dense reference implementations used as test oracles.

Nothing here imports the package; every formula is written out directly
with explicit inverses and determinants.
"""

import itertools
import math

import numpy as np


def se(x, y, ell, var):
    d = np.asarray(x, float) - np.asarray(y, float)
    return var * math.exp(-float(d @ d) / (2 * ell * ell))


def se_gram(X, ell, var):
    X = np.asarray(X, float).reshape(len(X), -1)
    n = X.shape[0]
    return np.array([[se(X[i], X[j], ell, var) for j in range(n)] for i in range(n)])


def se_cross(X, Y, ell, var):
    X = np.asarray(X, float).reshape(len(X), -1)
    Y = np.asarray(Y, float).reshape(len(Y), -1)
    return np.array([[se(a, b, ell, var) for b in Y] for a in X])


def dense_posterior(X, y, noise, Xq, ell, var):
    K = se_gram(X, ell, var)
    Kq = se_cross(X, Xq, ell, var)
    inv = np.linalg.inv(K + np.diag(noise))
    mean = Kq.T @ inv @ y
    cov = var - np.einsum("ij,ik,kj->j", Kq, inv, Kq)
    return mean, cov


def dense_lml(X, y, noise, ell, var):
    C = se_gram(X, ell, var) + np.diag(noise)
    sign, logdet = np.linalg.slogdet(C)
    assert sign > 0
    return float(-0.5 * y @ np.linalg.inv(C) @ y - 0.5 * logdet - 0.5 * len(y) * math.log(2 * math.pi))


def dense_nystrom(X, Xs, ell, var):
    Kns = se_cross(X, Xs, ell, var)
    return Kns @ np.linalg.inv(se_gram(Xs, ell, var)) @ Kns.T


def dense_elbo(X, y, noise, Xs, ell, var):
    K = se_gram(X, ell, var)
    Q = dense_nystrom(X, Xs, ell, var)
    C = Q + np.diag(noise)
    sign, logdet = np.linalg.slogdet(C)
    fit = -0.5 * y @ np.linalg.inv(C) @ y - 0.5 * logdet - 0.5 * len(y) * math.log(2 * math.pi)
    return float(fit - 0.5 * np.trace(np.diag(1.0 / noise) @ (K - Q)))


def dense_kl_terms(X, y, noise, Xs, ell, var):
    """The two pieces of log p(y) - elbo: the log-density ratio and the trace term."""
    K = se_gram(X, ell, var)
    Q = dense_nystrom(X, Xs, ell, var)
    S = np.diag(noise)
    A, B = K + S, Q + S
    ratio = (-0.5 * y @ np.linalg.inv(A) @ y - 0.5 * np.linalg.slogdet(A)[1]) - (
        -0.5 * y @ np.linalg.inv(B) @ y - 0.5 * np.linalg.slogdet(B)[1])
    trace = 0.5 * np.trace(np.linalg.inv(S) @ (K - Q))
    return float(ratio), float(trace)


def mdpp_enumeration(K, M):
    """Exact P(Z) proportional to det(K_ZZ) over all size-M subsets."""
    K = np.asarray(K, float)
    subsets = list(itertools.combinations(range(K.shape[0]), M))
    w = np.array([max(np.linalg.det(K[np.ix_(s, s)]), 0.0) for s in subsets])
    return dict(zip(subsets, w / w.sum()))


def synthetic_f(x, t):
    x = np.asarray(x, float)
    return np.exp(-0.05 * (x - 5 * np.sin(0.1 * t)) ** 2) + 0.5 * np.cos(0.2 * x) + 1.5


def bound_value(t, d, delta, c):
    L = math.log(max(t, 2))
    inner = math.log(max(d * L, 2))
    return c * math.sqrt(t * d * L ** (d + 5)) * math.sqrt(math.log(1 / delta) + d * inner ** (d + 3)) / t


def random_instance(rng, n, d, noise_range=(1e-2, 1.0)):
    X = rng.uniform(-3, 3, size=(n, d))
    y = rng.standard_normal(n)
    noise = rng.uniform(*noise_range, size=n)
    return X, y, noise


def mp_kl_terms(X, y, noise, Xs, ell, var, dps=50):
    """``dense_kl_terms`` in extended precision, for ill-conditioned inducing sets."""
    import mpmath as mp

    with mp.workdps(dps):
        K = mp.matrix(se_gram(X, ell, var))
        Kns = mp.matrix(se_cross(X, Xs, ell, var))
        Q = Kns * mp.inverse(mp.matrix(se_gram(Xs, ell, var))) * Kns.T
        S = mp.diag([mp.mpf(float(v)) for v in noise])
        Y = mp.matrix([float(v) for v in y])

        def logpdf(C):
            return -(Y.T * mp.inverse(C) * Y)[0] / 2 - mp.log(mp.det(C)) / 2

        ratio = logpdf(K + S) - logpdf(Q + S)
        trace = sum((K[i, i] - Q[i, i]) / S[i, i] for i in range(len(y))) / 2
        return float(ratio), float(trace)
