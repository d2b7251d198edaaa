"""GP-UCB policies for time-varying rewards.

Every policy is a step function ``(state, env_sample, cfg, grid, ...) ->
(action, new_state)``.  At step ``t`` the function samples the reward at the
action chosen at ``t - 1``, rebuilds its regression dataset, and returns the
next action ``argmax_grid mu(x) + beta * sigma(x)``.  States are never
mutated in place.

Variants
--------
sparq     ages observations (noise ``v ((t - i)^2 + 1)``), drops stale
          ones, and refreshes an M-DPP subset of past locations through an
          expert at every step.
gpucb     homoscedastic GP on the full history.
tvgpucb   spatio-temporal kernel ``(1 - eps)^{|t_i - t_j|/2} k(x_i, x_j)``.
rgpucb    GP-UCB restarted every ``window`` steps.
swgpucb   GP-UCB on the last ``window`` observations.
wgpucb    weights ``gamma^{t - i}`` folded into the noise as ``sigma2 / w_i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import gp
from .gp import GPPosterior, HeteroscedasticDataset, NumericalError
from .kernel import KernelSpec, as_points, kernel_matrix, temporal_decay, temporal_kernel_matrix
from .sparse import QueryBudget, mcmc_iterations, query_budget, residual_trace, sample_mdpp

VARIANTS = ("sparq", "gpucb", "tvgpucb", "rgpucb", "swgpucb", "wgpucb")

LABELS = {
    "sparq": "SparQ-GP-UCB",
    "gpucb": "GP-UCB",
    "tvgpucb": "TV-GP-UCB",
    "rgpucb": "R-GP-UCB",
    "swgpucb": "SW-GP-UCB",
    "wgpucb": "W-GP-UCB",
}


class StepError(RuntimeError):
    """A numerical failure inside a policy step; carries the step index."""

    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class Observation:
    location: tuple
    value: float
    acquired_at: int
    base_variance: float

    def __post_init__(self):
        if not self.base_variance > 0:
            raise ValueError("base variance must be positive")
        object.__setattr__(self, "location", tuple(float(v) for v in np.atleast_1d(self.location)))


@dataclass(frozen=True)
class AlgorithmConfig:
    """Policy definition.

    ``window`` is used by R/SW-GP-UCB, ``epsilon`` by TV-GP-UCB, ``gamma``
    by W-GP-UCB; ``budget``, ``expert_variance`` (defaults to ``sigma2``),
    ``mcmc_scale`` and ``eta`` by SparQ-GP-UCB.
    """

    variant: str
    kernel: KernelSpec = field(default_factory=KernelSpec)
    delta: float = 0.05
    rkhs_bound: float = 2.0
    sigma2: float = 0.01
    window: int | None = None
    epsilon: float = 0.01
    gamma: float = 0.95
    budget: QueryBudget = field(default_factory=QueryBudget)
    expert_variance: float | None = None
    mcmc_scale: float = 1.0
    eta: float = 0.1
    name: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not (0 < self.delta <= 1):
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if not self.rkhs_bound > 0:
            raise ValueError("rkhs_bound must be positive")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be a positive integer")
        if not (0 <= self.epsilon <= 1):
            raise ValueError("epsilon must lie in [0, 1]")
        if not (0 < self.gamma <= 1):
            raise ValueError("gamma must lie in (0, 1]")
        if self.expert_variance is not None and not self.expert_variance > 0:
            raise ValueError("expert_variance must be positive")
        if self.mcmc_scale < 0 or not self.eta > 0:
            raise ValueError("mcmc_scale must be >= 0 and eta > 0")

    @property
    def tag(self) -> str:
        return self.name or self.variant

    @property
    def label(self) -> str:
        return LABELS[self.variant]

    @property
    def expert_var(self) -> float:
        return self.sigma2 if self.expert_variance is None else self.expert_variance

    def with_horizon(self, T: int) -> "AlgorithmConfig":
        """Fill the default window ``ceil(sqrt(T))`` for windowed variants."""
        if self.variant in ("rgpucb", "swgpucb") and self.window is None:
            return replace(self, window=max(1, math.ceil(math.sqrt(T))))
        return self


@dataclass(frozen=True)
class Diagnostics:
    queries_issued: int = 0
    queries_last: int = 0
    discarded_last: int = 0
    discarded_total: int = 0
    variance_clamps: int = 0
    retained_last: int = 0
    residual_trace_last: float = 0.0
    beta_last: float = 0.0


@dataclass(frozen=True)
class BeliefState:
    history: tuple
    current_time: int
    last_posterior: GPPosterior
    next_index: int
    diagnostics: Diagnostics = Diagnostics()

    def __post_init__(self):
        times = [o.acquired_at for o in self.history]
        if any(a > b for a, b in zip(times, times[1:])):
            raise ValueError("history must be sorted by acquisition time")
        if times and times[-1] > self.current_time:
            raise ValueError("history contains observations from the future")


# -- shared machinery ---------------------------------------------------------


def inject_uncertainty(history, t: int) -> HeteroscedasticDataset:
    """Re-read past observations as noisy observations of ``f_t``.

    An observation taken at ``i`` with base variance ``v`` gets variance
    ``v * ((t - i)^2 + 1)``.
    """
    history = list(history)
    if not history:
        return HeteroscedasticDataset.empty(1)
    ages = np.array([t - o.acquired_at for o in history], dtype=float)
    if np.any(ages < 0):
        raise ValueError("observation acquired after the current time")
    base = np.array([o.base_variance for o in history])
    return HeteroscedasticDataset(
        np.array([o.location for o in history]),
        np.array([o.value for o in history]),
        base * (ages**2 + 1.0),
    )


def discard_threshold(t: int, sigma2: float) -> float:
    return sigma2 * max(math.log(t), 1.0) if t >= 1 else sigma2


def stale_mask(noise_variances, t: int, sigma2: float) -> np.ndarray:
    """Boolean keep-mask: variance within ``sigma2 * max(ln t, 1)``; the last row is always kept."""
    s = np.asarray(noise_variances, dtype=float)
    keep = s <= discard_threshold(t, sigma2)
    if keep.size:
        keep[-1] = True
    return keep


def discard_stale(data: HeteroscedasticDataset, t: int, sigma2: float):
    """Split ``data`` (rows in acquisition order) into kept observations and
    the locations of the discarded ones."""
    if t < 1:
        raise ValueError("time step must be >= 1")
    keep = stale_mask(data.noise_variances, t, sigma2)
    return data.subset(np.flatnonzero(keep)), data.locations[~keep]


def compute_beta(delta: float, Sigma, K, B: float) -> float:
    """``sqrt(2 log(2 |Sigma + K|^{1/2} / (delta |Sigma|^{1/2}))) + B``."""
    if not (0 < delta <= 1):
        raise ValueError("delta must lie in (0, 1]")
    Sigma = np.asarray(Sigma, dtype=float)
    s = np.diag(Sigma) if Sigma.ndim == 2 else Sigma.reshape(-1)
    K = np.asarray(K, dtype=float).reshape(s.size, s.size)
    if s.size == 0:
        half_logdet_ratio = 0.0
    else:
        L, _ = gp.stable_cholesky(K + np.diag(s), max(float(np.max(np.diag(K))), float(s.max())))
        half_logdet_ratio = float(np.log(np.diag(L)).sum()) - 0.5 * float(np.log(s).sum())
    return _beta(delta, half_logdet_ratio, B)


def _beta(delta, half_logdet_ratio, B):
    return math.sqrt(2.0 * (math.log(2.0) - math.log(delta) + max(half_logdet_ratio, 0.0))) + B


def posterior_beta(post: GPPosterior, delta: float, B: float) -> float:
    """``compute_beta`` reusing the posterior's cached factor of ``K + Sigma``."""
    if post.n == 0:
        return _beta(delta, 0.0, B)
    half = float(np.log(np.diag(post.factor)).sum()) - 0.5 * float(np.log(post.dataset.noise_variances).sum())
    return _beta(delta, half, B)


def ucb_scores(post: GPPosterior, beta: float, grid) -> np.ndarray:
    mean, var = post.predict(grid)
    return mean + beta * np.sqrt(var)


def ucb_index(post: GPPosterior, beta: float, grid) -> int:
    grid = as_points(grid)
    if grid.shape[0] == 0:
        raise ValueError("grid is empty")
    return int(np.argmax(ucb_scores(post, beta, grid)))


def ucb_select(post: GPPosterior, beta: float, grid) -> np.ndarray:
    """Grid point maximizing ``mu + beta * sigma``; lowest index on ties."""
    grid = as_points(grid)
    return grid[ucb_index(post, beta, grid)].copy()


# -- steps --------------------------------------------------------------------

EnvSample = Callable[[np.ndarray, int], float]
ExpertQuery = Callable[[np.ndarray, int], np.ndarray]


def initial_state(cfg: AlgorithmConfig, grid) -> tuple[np.ndarray, BeliefState]:
    """Prior-only state and the first action (``grid[0]`` for a stationary prior)."""
    grid = as_points(grid)
    post = gp.fit(cfg.kernel, HeteroscedasticDataset.empty(grid.shape[1]))
    beta = posterior_beta(post, cfg.delta, cfg.rkhs_bound)
    k = ucb_index(post, beta, grid)
    return grid[k].copy(), BeliefState((), 0, post, k, Diagnostics(beta_last=beta))


def _finish(state, cfg, grid, history, post, t, **diag) -> tuple[np.ndarray, BeliefState]:
    beta = posterior_beta(post, cfg.delta, cfg.rkhs_bound)
    k = ucb_index(post, beta, grid)
    d = state.diagnostics
    new_diag = replace(
        d,
        variance_clamps=d.variance_clamps + post.stats["variance_clamps"],
        beta_last=beta,
        retained_last=post.n,
        **diag,
    )
    return grid[k].copy(), BeliefState(tuple(history), t, post, k, new_diag)


def _observe(state, env_sample, cfg, grid) -> tuple[int, Observation]:
    t = state.current_time + 1
    x = grid[state.next_index]
    y = float(env_sample(x, t))
    return t, Observation(x, y, t, cfg.sigma2)


def _homoscedastic(history, sigma2) -> HeteroscedasticDataset:
    if not history:
        return HeteroscedasticDataset.empty(1)
    return HeteroscedasticDataset.homoscedastic(
        np.array([o.location for o in history]), [o.value for o in history], sigma2
    )


def _guard(fn):
    def wrapped(state, *args, **kwargs):
        try:
            return fn(state, *args, **kwargs)
        except NumericalError as exc:
            raise StepError(str(exc), state.current_time + 1) from exc

    wrapped.__name__ = fn.__name__
    wrapped.__doc__ = fn.__doc__
    return wrapped


@_guard
def gp_ucb_step(state, env_sample, cfg, grid, rng=None, expert=None):
    """Homoscedastic GP-UCB on the whole history."""
    grid = as_points(grid)
    t, obs = _observe(state, env_sample, cfg, grid)
    history = (*state.history, obs)
    post = gp.fit(cfg.kernel, _homoscedastic(history, cfg.sigma2))
    return _finish(state, cfg, grid, history, post, t)


@_guard
def tv_gp_ucb_step(state, env_sample, cfg, grid, rng=None, expert=None):
    """GP-UCB with the time-decayed kernel, predicting at time ``t + 1``."""
    grid = as_points(grid)
    t, obs = _observe(state, env_sample, cfg, grid)
    history = (*state.history, obs)
    data = _homoscedastic(history, cfg.sigma2)
    times = np.array([o.acquired_at for o in history], dtype=float)
    gram = temporal_kernel_matrix(cfg.kernel, cfg.epsilon, data.locations, times)
    scale = None if cfg.epsilon == 0 else temporal_decay(cfg.epsilon, t + 1, times)
    post = gp.fit_with_gram(cfg.kernel, data, gram, scale)
    return _finish(state, cfg, grid, history, post, t)


@_guard
def r_gp_ucb_step(state, env_sample, cfg, grid, rng=None, expert=None):
    """GP-UCB that forgets everything at the start of each block of ``window`` steps."""
    grid = as_points(grid)
    w = cfg.window or 1
    t, obs = _observe(state, env_sample, cfg, grid)
    previous = state.history if (t - 1) % w else ()
    history = (*previous, obs)
    post = gp.fit(cfg.kernel, _homoscedastic(history, cfg.sigma2))
    return _finish(state, cfg, grid, history, post, t)


@_guard
def sw_gp_ucb_step(state, env_sample, cfg, grid, rng=None, expert=None):
    """GP-UCB on the ``window`` most recent observations."""
    grid = as_points(grid)
    w = cfg.window or 1
    t, obs = _observe(state, env_sample, cfg, grid)
    history = (*state.history, obs)[-w:]
    post = gp.fit(cfg.kernel, _homoscedastic(history, cfg.sigma2))
    return _finish(state, cfg, grid, history, post, t)


@_guard
def w_gp_ucb_step(state, env_sample, cfg, grid, rng=None, expert=None):
    """Weighted GP-UCB: observation ``i`` gets noise variance ``sigma2 / gamma^{t - i}``."""
    grid = as_points(grid)
    t, obs = _observe(state, env_sample, cfg, grid)
    history = (*state.history, obs)
    ages = np.array([t - o.acquired_at for o in history], dtype=float)
    weights = np.maximum(cfg.gamma**ages, 1e-300)
    data = HeteroscedasticDataset(
        np.array([o.location for o in history]), np.array([o.value for o in history]), cfg.sigma2 / weights
    )
    post = gp.fit(cfg.kernel, data)
    return _finish(state, cfg, grid, history, post, t)


@_guard
def sparq_step(state, env_sample, cfg, grid, rng, expert):
    """One round of SparQ-GP-UCB.

    Samples the reward at the pending action, selects up to ``Q_t`` past
    locations by approximate M-DPP sampling over all stored locations,
    refreshes them through ``expert`` (replacing older observations at the
    same place), and fits on the refreshed points plus every observation
    whose aged variance is still below ``sigma2 * max(ln t, 1)``.
    """
    grid = as_points(grid)
    t, obs = _observe(state, env_sample, cfg, grid)
    history = [*state.history, obs]

    aged = inject_uncertainty(history, t)
    n_discarded = int((~stale_mask(aged.noise_variances, t, cfg.sigma2)).sum())

    X = aged.locations
    N = X.shape[0]
    Q = query_budget(cfg.budget, t, N)
    K = kernel_matrix(cfg.kernel, X)
    n_iters = mcmc_iterations(t, cfg.eta, cfg.mcmc_scale, N, Q)
    Z = sample_mdpp(K, Q, n_iters, rng)
    trace_err = residual_trace(K, Z)

    targets = []
    seen = set()
    for i in Z:
        loc = history[i].location
        if loc not in seen:
            seen.add(loc)
            targets.append(loc)
    answers = np.asarray(expert(np.array(targets), t), dtype=float) if targets else np.zeros(0)
    refreshed = [Observation(loc, float(y), t, cfg.expert_var) for loc, y in zip(targets, answers)]
    history = [o for o in history if not (o.location in seen and o.acquired_at < t)] + refreshed

    data = inject_uncertainty(history, t)
    keep = stale_mask(data.noise_variances, t, cfg.sigma2)
    keep |= np.array([o.acquired_at == t for o in history])
    post = gp.fit(cfg.kernel, data.subset(np.flatnonzero(keep)))

    d = state.diagnostics
    return _finish(
        state, cfg, grid, history, post, t,
        queries_issued=d.queries_issued + len(refreshed),
        queries_last=len(refreshed),
        discarded_last=n_discarded,
        discarded_total=d.discarded_total + n_discarded,
        residual_trace_last=trace_err,
    )


STEPS = {
    "sparq": sparq_step,
    "gpucb": gp_ucb_step,
    "tvgpucb": tv_gp_ucb_step,
    "rgpucb": r_gp_ucb_step,
    "swgpucb": sw_gp_ucb_step,
    "wgpucb": w_gp_ucb_step,
}


def step(state: BeliefState, env_sample: EnvSample, cfg: AlgorithmConfig, grid,
         rng: np.random.Generator | None = None, expert: ExpertQuery | None = None):
    """Dispatch to the step function of ``cfg.variant``."""
    if cfg.variant == "sparq" and (rng is None or expert is None):
        raise ValueError("SparQ-GP-UCB needs an rng for the M-DPP chain and an expert callback")
    return STEPS[cfg.variant](state, env_sample, cfg, grid, rng, expert)
