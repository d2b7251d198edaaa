"""Multi-seed regret benchmark.

Episode ``i`` of a batch uses seed ``base_seed + i``. Inside an episode three
independent substreams are derived from that seed::

    SeedSequence(seed, spawn_key=(0,))  environment sampling noise
    SeedSequence(seed, spawn_key=(1,))  expert answers
    SeedSequence(seed, spawn_key=(2,))  M-DPP chains

so every algorithm run with the same seed sees the same sampling noise
stream. Regret is measured on the decision grid the algorithms optimize
over, which makes every instant regret exactly nonnegative.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import algorithms as alg
from .algorithms import AlgorithmConfig, StepError
from .config import ExperimentConfig
from .environment import EnvironmentSpec, decision_grid, expert_query, sample, true_values
from .gp import HeteroscedasticDataset, NumericalError, default_grid, tune_hyperparameters
from .kernel import KernelSpec

SUBSTREAMS = ("environment", "expert", "dpp")

Policy = Callable[[int, np.ndarray, np.ndarray], int]
"""``policy(t, grid, f_t_on_grid) -> grid index``; used by the test oracles."""


class EpisodeError(RuntimeError):
    """An episode aborted on a numerical failure."""

    def __init__(self, algorithm: str, seed: int, step: int, message: str):
        super().__init__(f"{algorithm} seed {seed} step {step}: {message}")
        self.algorithm = algorithm
        self.seed = seed
        self.step = step


def substreams(seed: int) -> dict[str, np.random.Generator]:
    return {
        name: np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))
        for k, name in enumerate(SUBSTREAMS)
    }


@dataclass(frozen=True)
class RegretTrace:
    """Per-step regret of one episode; arrays are indexed by ``t - 1``."""

    tag: str
    seed: int
    instant: np.ndarray
    cumulative: np.ndarray
    average: np.ndarray
    queries: np.ndarray
    actions: np.ndarray

    @property
    def horizon(self) -> int:
        return self.instant.shape[0]

    @classmethod
    def from_instant(cls, tag, seed, instant, queries, actions) -> "RegretTrace":
        instant = np.asarray(instant, dtype=float)
        cum = np.empty_like(instant)
        acc = 0.0
        for i, r in enumerate(instant):
            acc = acc + r
            cum[i] = acc
        avg = cum / np.arange(1, instant.shape[0] + 1)
        return cls(tag, int(seed), instant, cum, avg, np.asarray(queries, dtype=int), np.asarray(actions, dtype=int))


@dataclass(frozen=True)
class EpisodeContext:
    """Quantities shared by every episode of a batch."""

    environment: EnvironmentSpec
    grid: np.ndarray
    f_table: np.ndarray  # (T, n_grid): f_t on the grid
    horizon: int

    @property
    def f_star(self) -> np.ndarray:
        return self.f_table.max(axis=1)


def make_context(cfg: ExperimentConfig) -> EpisodeContext:
    grid = decision_grid(cfg.environment, cfg.grid_resolution)
    table = np.stack([true_values(cfg.environment, grid, t) for t in range(1, cfg.horizon + 1)])
    return EpisodeContext(cfg.environment, grid, table, cfg.horizon)


def tuning_dataset(cfg: ExperimentConfig) -> HeteroscedasticDataset:
    """Noisy evaluations used to pick the kernel before any episode runs.

    Synthetic: ``n_points`` uniform locations at ``tuning.time``. CSV: every
    sensor over the first ``ceil(n_points / n_sensors)`` steps, taken as is.
    """
    env, tn = cfg.environment, cfg.tuning
    sigma2 = env.sigma2
    if env.kind == "csv":
        start = max(int(tn.time), 1)
        n_steps = min(max(1, math.ceil(tn.n_points / env.locations.shape[0])), env.n_days - start + 1)
        steps = range(start, start + max(n_steps, 1))
        X = np.concatenate([env.locations for _ in steps])
        y = np.concatenate([true_values(env, env.locations, t) for t in steps])
        return HeteroscedasticDataset.homoscedastic(X, y, sigma2)
    rng = np.random.default_rng(tn.seed)
    lo, hi = env.bounds[:, 0], env.bounds[:, 1]
    X = lo + (hi - lo) * rng.random((tn.n_points, env.dim))
    y = true_values(env, X, tn.time) + math.sqrt(sigma2) * rng.standard_normal(tn.n_points)
    return HeteroscedasticDataset.homoscedastic(X, y, sigma2)


def tune_kernel(cfg: ExperimentConfig) -> KernelSpec:
    """Grid-search kernel hyperparameters by log marginal likelihood."""
    tn = cfg.tuning
    grid = default_grid(tn.family, tn.lengthscales, tn.signal_variances)
    return tune_hyperparameters(tuning_dataset(cfg), grid)


def resolve_kernel(cfg: ExperimentConfig) -> ExperimentConfig:
    """Return ``cfg`` with a kernel installed, tuning one if none was given."""
    return cfg if cfg.kernel is not None else cfg.with_kernel(tune_kernel(cfg))


def run_episode(cfg: ExperimentConfig, algo: AlgorithmConfig | None, seed: int, *,
                context: EpisodeContext | None = None, policy: Policy | None = None) -> RegretTrace:
    """Play ``cfg.horizon`` steps and record the dynamic regret.

    ``algo.kernel`` is used as given; call :func:`resolve_kernel` first to
    apply tuning. With ``policy`` set the GP machinery is bypassed and the
    policy picks grid indices directly (``algo`` may then be ``None``).
    """
    ctx = context or make_context(cfg)
    T, grid, env = ctx.horizon, ctx.grid, ctx.environment
    instant = np.empty(T)
    queries = np.zeros(T, dtype=int)
    actions = np.empty(T, dtype=int)

    if policy is not None:
        tag = algo.tag if algo is not None else getattr(policy, "__name__", "policy")
        for t in range(1, T + 1):
            f = ctx.f_table[t - 1]
            k = int(policy(t, grid, f))
            actions[t - 1] = k
            instant[t - 1] = f.max() - f[k]
        return RegretTrace.from_instant(tag, seed, instant, queries, actions)

    streams = substreams(seed)
    r_env, r_exp, r_dpp = (streams[s] for s in SUBSTREAMS)

    def env_sample(x, t):
        return sample(env, x, t, r_env)

    def expert(X, t):
        return expert_query(env, X, t, algo.expert_var, r_exp)

    t = 0
    try:
        _, state = alg.initial_state(algo, grid)
        issued = 0
        for t in range(1, T + 1):
            f = ctx.f_table[t - 1]
            k = state.next_index
            actions[t - 1] = k
            instant[t - 1] = f.max() - f[k]
            _, state = alg.step(state, env_sample, algo, grid, r_dpp, expert)
            queries[t - 1] = state.diagnostics.queries_issued - issued
            issued = state.diagnostics.queries_issued
    except StepError as exc:
        raise EpisodeError(algo.tag, seed, exc.step, str(exc)) from exc
    except NumericalError as exc:
        raise EpisodeError(algo.tag, seed, t, str(exc)) from exc
    return RegretTrace.from_instant(algo.tag, seed, instant, queries, actions)


@dataclass(frozen=True)
class EpisodeFailure:
    algorithm: str
    seed: int
    step: int
    message: str


@dataclass(frozen=True)
class AlgorithmSummary:
    """Across-episode mean and sample standard deviation of average regret."""

    tag: str
    label: str
    seeds: tuple
    mean_avg_regret: np.ndarray
    std_avg_regret: np.ndarray
    mean_queries: np.ndarray
    n_failed: int = 0

    @property
    def n_episodes(self) -> int:
        return len(self.seeds)


@dataclass
class BatchResult:
    config: ExperimentConfig
    summaries: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    bound: np.ndarray | None = None

    @property
    def ok(self) -> bool:
        return not self.failures


def aggregate(tag: str, label: str, traces: Sequence[RegretTrace], horizon: int, n_failed: int = 0) -> AlgorithmSummary:
    """Fold episode traces in seed order; input order does not matter."""
    ordered = sorted(traces, key=lambda tr: tr.seed)
    if not ordered:
        nan = np.full(horizon, np.nan)
        return AlgorithmSummary(tag, label, (), nan, nan.copy(), nan.copy(), n_failed)
    A = np.stack([tr.average for tr in ordered])
    Qs = np.stack([tr.queries for tr in ordered]).astype(float)
    mean = A.mean(axis=0)
    std = A.std(axis=0, ddof=1) if len(ordered) > 1 else np.zeros(horizon)
    return AlgorithmSummary(tag, label, tuple(tr.seed for tr in ordered), mean, std, Qs.mean(axis=0), n_failed)


def worker_count(n_jobs: int) -> int:
    """Parallelism: ``SPARQ_WORKERS`` if set, else the CPU count, capped by the job count."""
    raw = os.environ.get("SPARQ_WORKERS")
    try:
        cap = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        cap = 1
    return max(1, min(cap, n_jobs))


_WORKER = {}


def _init_worker(cfg, ctx):
    _WORKER["cfg"], _WORKER["ctx"] = cfg, ctx


def _job(args):
    i, seed = args
    cfg, ctx = _WORKER["cfg"], _WORKER["ctx"]
    return _run_guarded(cfg, cfg.algorithms[i], seed, ctx)


def _run_guarded(cfg, algo, seed, ctx):
    try:
        return run_episode(cfg, algo, seed, context=ctx)
    except EpisodeError as exc:
        return EpisodeFailure(exc.algorithm, exc.seed, exc.step, str(exc))


def run_batch(cfg: ExperimentConfig, *, workers: int | None = None,
              progress: Callable[[str], None] | None = None) -> BatchResult:
    """Run every algorithm for ``cfg.realizations`` seeds and aggregate.

    Tunes the kernel first when none is configured. Failed episodes are
    recorded in ``failures`` and left out of the aggregates.
    """
    cfg = resolve_kernel(cfg)
    ctx = make_context(cfg)
    seeds = [cfg.base_seed + i for i in range(cfg.realizations)]
    jobs = [(i, s) for i in range(len(cfg.algorithms)) for s in seeds]
    n_workers = workers if workers is not None else worker_count(len(jobs))

    outcomes = []
    if n_workers <= 1:
        for i, s in jobs:
            outcomes.append(_run_guarded(cfg, cfg.algorithms[i], s, ctx))
            if progress:
                progress(f"{cfg.algorithms[i].tag} seed {s} done")
    else:
        with ProcessPoolExecutor(n_workers, initializer=_init_worker, initargs=(cfg, ctx)) as pool:
            for (i, s), out in zip(jobs, pool.map(_job, jobs)):
                outcomes.append(out)
                if progress:
                    progress(f"{cfg.algorithms[i].tag} seed {s} done")

    result = BatchResult(cfg)
    for algo in cfg.algorithms:
        mine = [o for (i, _), o in zip(jobs, outcomes) if cfg.algorithms[i].tag == algo.tag]
        traces = [o for o in mine if isinstance(o, RegretTrace)]
        fails = [o for o in mine if isinstance(o, EpisodeFailure)]
        result.traces[algo.tag] = sorted(traces, key=lambda tr: tr.seed)
        result.failures.extend(fails)
        result.summaries[algo.tag] = aggregate(algo.tag, algo.label, traces, cfg.horizon, len(fails))
    if cfg.bound_curve.enabled:
        ts = np.arange(1, cfg.horizon + 1)
        result.bound = theoretical_bound(ts, cfg.environment.dim, cfg.delta, cfg.bound_curve.constant)
    return result


def theoretical_bound(ts, d: int, delta: float, constant: float = 1.0) -> np.ndarray:
    """Average-regret form of the high-probability regret bound.

    ``C sqrt(t d L^{d+5}) sqrt(ln(1/delta) + d ln(d L)^{d+3}) / t`` with
    ``L = ln max(t, 2)``; the inner logarithm's argument is floored at 2.
    """
    t = np.asarray(ts, dtype=float)
    L = np.log(np.maximum(t, 2.0))
    inner = np.log(np.maximum(d * L, 2.0))
    total = np.sqrt(t * d * L ** (d + 5)) * np.sqrt(np.log(1.0 / delta) + d * inner ** (d + 3))
    return constant * total / t


# -- output ------------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _summaries(results) -> Mapping[str, AlgorithmSummary]:
    return results.summaries if isinstance(results, BatchResult) else results


def emit_csv(results, path) -> list[Path]:
    """Write ``<tag>.csv`` per algorithm and ``summary.csv`` into directory ``path``.

    Floats use the shortest round-trip representation, so re-reading the
    files reproduces the aggregates exactly.
    """
    out = Path(path)
    written = []
    summaries = _summaries(results)
    rows = ["algorithm,label,n_episodes,n_failed,t,mean_avg_regret,std_avg_regret,mean_queries"]
    for tag, s in summaries.items():
        lines = ["t,mean_avg_regret,std_avg_regret,mean_queries"]
        for i in range(s.mean_avg_regret.shape[0]):
            lines.append(f"{i + 1},{_fmt(s.mean_avg_regret[i])},{_fmt(s.std_avg_regret[i])},{_fmt(s.mean_queries[i])}")
        p = out / f"{tag}.csv"
        _write(p, "\n".join(lines) + "\n")
        written.append(p)
        T = s.mean_avg_regret.shape[0]
        rows.append(f"{tag},{s.label},{s.n_episodes},{s.n_failed},{T},"
                    f"{_fmt(s.mean_avg_regret[-1])},{_fmt(s.std_avg_regret[-1])},{_fmt(s.mean_queries[-1])}")
    p = out / "summary.csv"
    _write(p, "\n".join(rows) + "\n")
    written.append(p)
    if isinstance(results, BatchResult) and results.bound is not None:
        p = out / "bound.csv"
        _write(p, "t,bound\n" + "".join(f"{i + 1},{_fmt(v)}\n" for i, v in enumerate(results.bound)))
        written.append(p)
    return written


def emit_traces(traces: Sequence[RegretTrace], path) -> list[Path]:
    """One ``<tag>_seed<k>.csv`` per episode with the raw per-step trace."""
    out = Path(path)
    written = []
    for tr in traces:
        lines = ["t,action,instant_regret,cumulative_regret,average_regret,queries_used"]
        for i in range(tr.horizon):
            lines.append(f"{i + 1},{tr.actions[i]},{_fmt(tr.instant[i])},{_fmt(tr.cumulative[i])},"
                         f"{_fmt(tr.average[i])},{tr.queries[i]}")
        p = out / f"{tr.tag}_seed{tr.seed}.csv"
        _write(p, "\n".join(lines) + "\n")
        written.append(p)
    return written


def read_summary_csv(path) -> dict[str, np.ndarray]:
    """Parse a per-algorithm CSV back into arrays."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {"t": data[:, 0].astype(int), "mean_avg_regret": data[:, 1],
            "std_avg_regret": data[:, 2], "mean_queries": data[:, 3]}


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def emit_plot(results, bound_curve=None, path="regret.svg", *, width: int = 800, height: int = 500) -> Path:
    """Line chart of mean average regret with a shaded one-std band per algorithm.

    The optional ``bound_curve`` (values per step) is drawn in black and
    clipped to the plot area. Produces one ``<path>`` per mean line, one per
    band and one for the bound.
    """
    summaries = [s for s in _summaries(results).values() if s.n_episodes > 0]
    left, right, top, bottom = 70, 170, 20, 50
    pw, ph = width - left - right, height - top - bottom
    T = max([s.mean_avg_regret.shape[0] for s in summaries] + ([len(bound_curve)] if bound_curve is not None else []) + [1])
    ymax = max([float(np.max(s.mean_avg_regret + s.std_avg_regret)) for s in summaries] + [0.0])
    if ymax <= 0 and bound_curve is not None and len(bound_curve):
        ymax = float(np.max(bound_curve))
    ymax = 1.0 if ymax <= 0 else 1.1 * ymax

    def sx(t):
        return left + (0.0 if T == 1 else (t - 1) / (T - 1) * pw)

    def sy(v):
        return top + ph - min(max(v, -0.05 * ymax), 1.05 * ymax) / ymax * ph

    def polyline(ts, vs):
        return " ".join(f"{'M' if i == 0 else 'L'}{sx(t):.2f},{sy(v):.2f}" for i, (t, v) in enumerate(zip(ts, vs)))

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<defs><clipPath id="plot-area"><rect x="{left}" y="{top}" width="{pw}" height="{ph}"/></clipPath></defs>',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for k in range(6):
        t = 1 + (T - 1) * k / 5
        v = ymax * k / 5
        parts.append(f'<text x="{sx(t):.2f}" y="{top + ph + 18}" font-size="11" text-anchor="middle">{round(t)}</text>')
        parts.append(f'<text x="{left - 6}" y="{sy(v) + 4:.2f}" font-size="11" text-anchor="end">{v:.3g}</text>')
    parts.append(f'<text x="{left + pw / 2:.2f}" y="{height - 10}" font-size="13" text-anchor="middle">iteration t</text>')
    parts.append(f'<text x="16" y="{top + ph / 2:.2f}" font-size="13" text-anchor="middle" '
                 f'transform="rotate(-90 16 {top + ph / 2:.2f})">average regret</text>')
    parts.append('<g clip-path="url(#plot-area)">')
    legend = []
    for idx, s in enumerate(summaries):
        color = PALETTE[idx % len(PALETTE)]
        ts = np.arange(1, s.mean_avg_regret.shape[0] + 1)
        lo, hi = s.mean_avg_regret - s.std_avg_regret, s.mean_avg_regret + s.std_avg_regret
        band = polyline(ts, hi) + " " + " ".join(f"L{sx(t):.2f},{sy(v):.2f}" for t, v in zip(ts[::-1], lo[::-1])) + " Z"
        parts.append(f'<path d="{band}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        parts.append(f'<path d="{polyline(ts, s.mean_avg_regret)}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        legend.append((escape(s.label), color))
    if bound_curve is not None and len(bound_curve):
        ts = np.arange(1, len(bound_curve) + 1)
        parts.append(f'<path d="{polyline(ts, np.asarray(bound_curve))}" fill="none" stroke="black" stroke-width="1.5"/>')
        legend.append(("theoretical bound", "black"))
    parts.append("</g>")
    for i, (name, color) in enumerate(legend):
        y = top + 10 + 18 * i
        parts.append(f'<line x1="{left + pw + 12}" y1="{y}" x2="{left + pw + 32}" y2="{y}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 38}" y="{y + 4}" font-size="11">{name}</text>')
    parts.append("</svg>")
    p = Path(path)
    _write(p, "\n".join(parts) + "\n")
    return p
