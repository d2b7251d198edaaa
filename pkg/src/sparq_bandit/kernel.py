"""Stationary covariance functions and Gram-matrix construction.

Points are handled as 2-D arrays of shape ``(n, d)``.  One-dimensional
inputs (scalars or flat sequences) are promoted to a single column.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FAMILIES = ("se", "matern52")

_SQRT5 = np.sqrt(5.0)


class KernelError(ValueError):
    """Raised on invalid kernel hyperparameters or mismatched inputs."""


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus isotropic hyperparameters.

    Parameters
    ----------
    family : {"se", "matern52"}
        Radial profile. ``"se"`` is the squared exponential.
    lengthscale : float
        Isotropic lengthscale, in input-space units.
    signal_variance : float
        Prior variance ``k(x, x)``.
    """

    family: str = "se"
    lengthscale: float = 1.0
    signal_variance: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise KernelError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        if not (np.isfinite(self.lengthscale) and self.lengthscale > 0):
            raise KernelError(f"lengthscale must be positive, got {self.lengthscale}")
        if not (np.isfinite(self.signal_variance) and self.signal_variance > 0):
            raise KernelError(f"signal_variance must be positive, got {self.signal_variance}")

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "lengthscale": float(self.lengthscale),
            "signal_variance": float(self.signal_variance),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        unknown = set(d) - {"family", "lengthscale", "signal_variance"}
        if unknown:
            raise KernelError(f"unknown kernel fields: {sorted(unknown)}")
        return cls(
            family=d.get("family", "se"),
            lengthscale=float(d.get("lengthscale", 1.0)),
            signal_variance=float(d.get("signal_variance", 1.0)),
        )


def as_points(X, d: int | None = None) -> np.ndarray:
    """Coerce ``X`` to a float array of shape ``(n, d)``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        # a flat sequence is a list of scalars unless the caller says otherwise
        X = X.reshape(1, -1) if (d is not None and d > 1 and X.size == d) else X.reshape(-1, 1)
    elif X.ndim != 2:
        raise KernelError(f"points must be at most 2-D, got shape {X.shape}")
    if d is not None and X.shape[0] > 0 and X.shape[1] != d:
        raise KernelError(f"dimension mismatch: expected {d}, got {X.shape[1]}")
    return X


def as_point(x, d: int | None = None) -> np.ndarray:
    """Coerce a single point to a 1-D array of length ``d``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim != 1:
        raise KernelError(f"a point must be 1-D, got shape {x.shape}")
    if d is not None and x.shape[0] != d:
        raise KernelError(f"dimension mismatch: expected {d}, got {x.shape[0]}")
    return x


def _profile(spec: KernelSpec, sqdist: np.ndarray) -> np.ndarray:
    if spec.family == "se":
        return np.exp(-0.5 * sqdist / spec.lengthscale**2)
    r = _SQRT5 * np.sqrt(sqdist) / spec.lengthscale
    return (1.0 + r + r * r / 3.0) * np.exp(-r)


def _sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    if A.shape[1] == 1:
        diff = A[:, 0][:, None] - B[:, 0][None, :]
        return diff * diff
    diff = A[:, None, :] - B[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def kernel_eval(spec: KernelSpec, x, x2) -> float:
    """Evaluate ``k(x, x2)`` for two single points."""
    x = as_point(x)
    x2 = as_point(x2, x.shape[0])
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(x2))):
        raise KernelError("kernel inputs must be finite")
    d2 = float(np.dot(x - x2, x - x2))
    return float(spec.signal_variance * _profile(spec, np.asarray(d2)))


def cross_matrix(spec: KernelSpec, X, X2) -> np.ndarray:
    """Cross-covariance matrix with entries ``k(X[i], X2[j])``."""
    X = as_points(X)
    X2 = as_points(X2, X.shape[1] if X.shape[0] else None)
    if X.shape[0] and X2.shape[0] and X.shape[1] != X2.shape[1]:
        raise KernelError(f"dimension mismatch: {X.shape[1]} vs {X2.shape[1]}")
    if X.shape[0] == 0 or X2.shape[0] == 0:
        return np.zeros((X.shape[0], X2.shape[0]))
    return spec.signal_variance * _profile(spec, _sqdist(X, X2))


def kernel_matrix(spec: KernelSpec, X) -> np.ndarray:
    """Symmetric Gram matrix ``K[i, j] = k(X[i], X[j])``.

    The diagonal is set to ``signal_variance`` exactly; no jitter is added.
    """
    X = as_points(X)
    K = cross_matrix(spec, X, X)
    if K.size:
        K = 0.5 * (K + K.T)
        np.fill_diagonal(K, spec.signal_variance)
    return K


def kernel_vector(spec: KernelSpec, X, x) -> np.ndarray:
    """Vector ``[k(X[0], x), ..., k(X[n-1], x)]``."""
    X = as_points(X)
    if X.shape[0] == 0:
        as_point(x)
        return np.zeros(0)
    x = as_point(x, X.shape[1])
    return cross_matrix(spec, X, x[None, :])[:, 0]


def temporal_decay(epsilon: float, t, t2) -> np.ndarray:
    """Forgetting factor ``(1 - epsilon) ** (|t - t2| / 2)``, broadcast over inputs."""
    if not (0.0 <= epsilon <= 1.0):
        raise KernelError(f"epsilon must lie in [0, 1], got {epsilon}")
    lag = np.abs(np.asarray(t, dtype=float) - np.asarray(t2, dtype=float))
    if epsilon == 1.0:
        # 0 ** 0 == 1 keeps equal-time pairs correlated
        return np.where(lag == 0, 1.0, 0.0)
    return (1.0 - epsilon) ** (lag / 2.0)


def temporal_kernel_eval(spec: KernelSpec, epsilon: float, x, t, x2, t2) -> float:
    """Spatio-temporal covariance ``(1 - epsilon)^{|t - t2|/2} k(x, x2)``."""
    if t < 0 or t2 < 0:
        raise KernelError("time indices must be nonnegative")
    return float(temporal_decay(epsilon, t, t2)) * kernel_eval(spec, x, x2)


def temporal_kernel_matrix(spec: KernelSpec, epsilon: float, X, times) -> np.ndarray:
    """Gram matrix of the spatio-temporal kernel over ``(X[i], times[i])`` pairs."""
    times = np.asarray(times, dtype=float)
    K = kernel_matrix(spec, X)
    if epsilon == 0.0:
        return K
    return K * temporal_decay(epsilon, times[:, None], times[None, :])
