"""Choosing expert-query locations with an (approximate) M-DPP.

``greedy_init`` builds a high-determinant starting subset one Schur
complement at a time; ``sample_mdpp`` then runs the Metropolis swap chain
whose stationary law is the M-DPP ``P(Z) ~ det(K_ZZ)``.  The chain keeps the
inverse of ``K_ZZ`` and updates it in O(M^2) per accepted swap, so no
determinant is ever formed from scratch inside the loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numba
import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .gp import NumericalError, stable_cholesky

REFRESH_EVERY = 256
MAX_ENUMERATION = 100_000


def _jitter(K: np.ndarray) -> float:
    return 1e-10 * max(float(np.max(np.diag(K))), 1e-300) if K.size else 0.0


def schur_complement(K: np.ndarray, Z, j: int) -> float:
    """``K_jj - K_jZ K_ZZ^{-1} K_Zj``, clamped at 0."""
    K = np.asarray(K, dtype=float)
    Z = np.asarray(Z, dtype=int).reshape(-1)
    if j in set(Z.tolist()):
        raise ValueError(f"index {j} is already in Z")
    if Z.size == 0:
        return max(float(K[j, j]), 0.0)
    L, _ = stable_cholesky(K[np.ix_(Z, Z)], max(float(np.max(np.diag(K))), 1e-300))
    b = K[Z, j]
    s = K[j, j] - b @ cho_solve((L, True), b, check_finite=False)
    return max(float(s), 0.0)


def greedy_init(K: np.ndarray, M: int) -> np.ndarray:
    """Greedy maximum-determinant subset of size ``M``.

    Each round adds the index with the largest Schur complement against the
    current selection (lowest index on ties). This is a partial pivoted
    Cholesky: the running complements of all candidates are updated in
    O(N) per round.
    """
    K = np.asarray(K, dtype=float)
    N = K.shape[0]
    if not (1 <= M <= N):
        raise ValueError(f"subset size must satisfy 1 <= M <= N={N}, got {M}")
    if M == N:
        return np.arange(N)
    resid = np.diag(K).astype(float).copy()
    rows = np.zeros((M, N))
    chosen = np.zeros(M, dtype=int)
    taken = np.zeros(N, dtype=bool)
    for m in range(M):
        score = np.where(taken, -np.inf, resid)
        j = int(np.argmax(score))
        chosen[m] = j
        taken[j] = True
        pivot = resid[j]
        if pivot <= 0:
            # only degenerate (duplicate) candidates remain; keep the running rows as they are
            continue
        e = (K[j] - rows[:m, j] @ rows[:m]) / math.sqrt(pivot)
        rows[m] = e
        resid = np.maximum(resid - e * e, 0.0)
        resid[j] = 0.0
    return chosen


@dataclass(frozen=True)
class SubsetState:
    """State of the swap chain.

    ``inverse`` holds ``(K_ZZ + jitter I)^{-1}`` and ``logdet`` the matching
    log-determinant; ``outside`` lists the complement of ``selected``.
    """

    ground_matrix: np.ndarray
    selected: np.ndarray
    outside: np.ndarray
    inverse: np.ndarray
    logdet: float
    jitter: float
    accepted: int = 0
    proposals: int = 0

    @classmethod
    def from_subset(cls, K, Z) -> "SubsetState":
        K = np.asarray(K, dtype=float)
        Z = np.asarray(Z, dtype=int).reshape(-1)
        N = K.shape[0]
        if len(set(Z.tolist())) != Z.size or np.any(Z < 0) or np.any(Z >= N):
            raise ValueError("subset must hold distinct indices in range")
        jit = _jitter(K)
        inv, logdet = _inverse_logdet(K[np.ix_(Z, Z)] + jit * np.eye(Z.size))
        mask = np.ones(N, dtype=bool)
        mask[Z] = False
        return cls(K, Z.copy(), np.flatnonzero(mask), inv, logdet, jit)

    @property
    def size(self) -> int:
        return self.selected.size


def _inverse_logdet(A: np.ndarray) -> tuple[np.ndarray, float]:
    if A.shape[0] == 0:
        return np.zeros((0, 0)), 0.0
    L, _ = stable_cholesky(A, 1e-300 + float(np.max(np.diag(A))))
    inv = cho_solve((L, True), np.eye(A.shape[0]), check_finite=False)
    return 0.5 * (inv + inv.T), 2.0 * float(np.log(np.diag(L)).sum())


@numba.njit(cache=True)
def _swap_ratio(K, jit, sel, A, p, j):
    M = sel.shape[0]
    Au_p = 0.0
    quad = 0.0
    u = np.empty(M)
    for a in range(M):
        u[a] = K[sel[a], j]
    for a in range(M):
        acc = 0.0
        for b in range(M):
            acc += A[a, b] * u[b]
        quad += u[a] * acc
        if a == p:
            Au_p = acc
    s_jz = K[j, j] + jit - quad
    return A[p, p] * s_jz + Au_p * Au_p


@numba.njit(cache=True)
def _apply_swap(K, jit, sel, A, p, j):
    M = sel.shape[0]
    App = A[p, p]
    col = A[:, p].copy()
    # downdate: inverse of K over Z \ {Z[p]}, embedded with a zero row/column at p
    for a in range(M):
        for b in range(M):
            A[a, b] -= col[a] * col[b] / App
    sel[p] = j
    u = np.empty(M)
    for a in range(M):
        u[a] = K[sel[a], j]
    u[p] = 0.0
    w = np.empty(M)
    quad = 0.0
    for a in range(M):
        acc = 0.0
        for b in range(M):
            acc += A[a, b] * u[b]
        w[a] = acc
        quad += u[a] * acc
    s = K[j, j] + jit - quad
    w[p] = -1.0
    for a in range(M):
        for b in range(M):
            A[a, b] += w[a] * w[b] / s


@numba.njit(cache=True)
def _refresh(K, jit, sel, A):
    M = sel.shape[0]
    S = np.empty((M, M))
    for a in range(M):
        for b in range(M):
            S[a, b] = K[sel[a], sel[b]]
        S[a, a] += jit
    L = np.linalg.cholesky(S)
    logdet = 0.0
    for a in range(M):
        logdet += 2.0 * np.log(L[a, a])
    Ainv = np.linalg.inv(S)
    for a in range(M):
        for b in range(M):
            A[a, b] = 0.5 * (Ainv[a, b] + Ainv[b, a])
    return logdet


@numba.njit(cache=True)
def _run_chain(K, jit, sel, out, A, logdet, ipos, jpos, unif, accepted, refresh_every):
    n_acc = 0
    for n in range(ipos.shape[0]):
        p = ipos[n]
        q = jpos[n]
        j = out[q]
        r = _swap_ratio(K, jit, sel, A, p, j)
        if not (r > 0.0):
            continue
        prob = 0.5 if r >= 1.0 else 0.5 * r
        if unif[n] < prob:
            i = sel[p]
            _apply_swap(K, jit, sel, A, p, j)
            out[q] = i
            logdet += np.log(r)
            n_acc += 1
            if (accepted + n_acc) % refresh_every == 0:
                logdet = _refresh(K, jit, sel, A)
    return n_acc, logdet


def _draws(rng: np.random.Generator, n: int, M: int, N: int):
    ipos = rng.integers(0, M, size=n)
    jpos = rng.integers(0, N - M, size=n)
    unif = rng.random(n)
    return ipos, jpos, unif


def acceptance_probability(state: SubsetState, position: int, j: int) -> float:
    """Metropolis probability ``min(1, det K_Z' / det K_Z) / 2`` of swapping
    ``selected[position]`` for candidate ``j``."""
    r = _swap_ratio(state.ground_matrix, state.jitter, state.selected, state.inverse, int(position), int(j))
    return 0.5 * min(1.0, r) if r > 0 else 0.0


def swap_ratio(state: SubsetState, position: int, j: int) -> float:
    """Incremental determinant ratio ``det K_Z' / det K_Z`` for a proposed swap."""
    return float(_swap_ratio(state.ground_matrix, state.jitter, state.selected, state.inverse,
                             int(position), int(j)))


def _advance(state: SubsetState, n_iters: int, rng) -> SubsetState:
    N, M = state.ground_matrix.shape[0], state.size
    if n_iters <= 0 or M == 0 or M == N:
        return state
    sel = state.selected.copy()
    out = state.outside.copy()
    A = np.ascontiguousarray(state.inverse.copy())
    ipos, jpos, unif = _draws(rng, n_iters, M, N)
    n_acc, logdet = _run_chain(np.ascontiguousarray(state.ground_matrix), state.jitter, sel, out, A,
                               state.logdet, ipos, jpos, unif, state.accepted, REFRESH_EVERY)
    if not np.isfinite(logdet):
        raise NumericalError("M-DPP chain produced a non-finite log-determinant")
    return SubsetState(state.ground_matrix, sel, out, A, float(logdet), state.jitter,
                       state.accepted + int(n_acc), state.proposals + n_iters)


def mcmc_step(state: SubsetState, rng: np.random.Generator) -> SubsetState:
    """One proposal of the swap chain: pick ``i`` in Z and ``j`` outside Z
    uniformly, accept with probability ``min(1, det ratio) / 2``."""
    M, N = state.size, state.ground_matrix.shape[0]
    if not (0 < M < N):
        raise ValueError(f"mcmc_step needs 0 < M < N, got M={M}, N={N}")
    return _advance(state, 1, rng)


def sample_mdpp(K: np.ndarray, M: int, n_iters: int, rng: np.random.Generator) -> np.ndarray:
    """Approximate M-DPP sample: greedy start followed by ``n_iters`` swap proposals."""
    return sample_mdpp_state(K, M, n_iters, rng).selected.copy()


def sample_mdpp_state(K: np.ndarray, M: int, n_iters: int, rng: np.random.Generator) -> SubsetState:
    K = np.asarray(K, dtype=float)
    if n_iters < 0:
        raise ValueError("n_iters must be nonnegative")
    Z0 = greedy_init(K, M)
    state = SubsetState.from_subset(K, Z0)
    return _advance(state, int(n_iters), rng)


def exact_mdpp_distribution(K: np.ndarray, M: int) -> dict[tuple[int, ...], float]:
    """Enumerate ``P(Z) = det K_ZZ / sum_{|Z'|=M} det K_Z'Z'`` over all M-subsets.

    Test-oracle scale only (at most 1e5 subsets).
    """
    K = np.asarray(K, dtype=float)
    N = K.shape[0]
    if not (0 <= M <= N):
        raise ValueError(f"need 0 <= M <= N, got M={M}, N={N}")
    if math.comb(N, M) > MAX_ENUMERATION:
        raise ValueError(f"C({N},{M}) = {math.comb(N, M)} subsets exceeds the enumeration guard")
    subsets = list(combinations(range(N), M))
    dets = np.array([np.linalg.det(K[np.ix_(Z, Z)]) if M else 1.0 for Z in subsets])
    dets = np.maximum(dets, 0.0)
    total = dets.sum()
    if not total > 0:
        raise ValueError("every M-subset has zero determinant")
    return {Z: float(d / total) for Z, d in zip(subsets, dets)}


def residual_trace(K: np.ndarray, Z) -> float:
    """``tr(K - K_{:,Z} K_ZZ^{-1} K_{Z,:})``: the Nystrom trace error of subset Z."""
    K = np.asarray(K, dtype=float)
    Z = np.asarray(Z, dtype=int).reshape(-1)
    if Z.size == 0:
        return float(np.trace(K))
    L, _ = stable_cholesky(K[np.ix_(Z, Z)], max(float(np.max(np.diag(K))), 1e-300))
    V = solve_triangular(L, K[Z, :], lower=True, check_finite=False)
    return max(float(np.trace(K) - np.einsum("ij,ij->", V, V)), 0.0)


@dataclass(frozen=True)
class QueryBudget:
    """Expert-query budget ``c * log(t)^d``."""

    c: float = 6.0
    d: int = 1

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"budget multiplier must be positive, got {self.c}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"budget dimension must be a positive integer, got {self.d}")


def query_budget(budget: QueryBudget, t: int, n_candidates: int | None = None) -> int:
    """``max(1, ceil(c * ln(max(t, 2))^d))``, capped at ``n_candidates``."""
    if t < 1:
        raise ValueError("time step must be >= 1")
    q = max(1, math.ceil(budget.c * math.log(max(t, 2)) ** budget.d))
    if n_candidates is not None:
        q = min(q, int(n_candidates))
    return q


def mcmc_iterations(t: int, eta: float, scale: float, n_candidates: int, budget: int) -> int:
    """Chain length ``ceil(scale * N * M * ln(N * t / eta))`` (0 when disabled or trivial)."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    N, M = int(n_candidates), int(budget)
    if scale <= 0 or N <= 0 or M <= 0 or M >= N:
        return 0
    arg = N * max(t, 1) / eta
    if arg <= 1:
        return 0
    return math.ceil(scale * N * M * math.log(arg))
