"""JSON experiment configuration.

Example::

    {
      "environment": {"kind": "synthetic", "bounds": [-50, 50], "sigma2": 0.01},
      "horizon": 500, "realizations": 40, "base_seed": 0, "grid_resolution": 1001,
      "delta": 0.05, "rkhs_bound": 2.0,
      "tuning": {"n_points": 200, "time": 0, "family": "se",
                 "lengthscales": [0.5, 1, 2, 4, 8], "signal_variances": [0.25, 1, 4]},
      "bound_curve": {"enabled": true, "constant": 1.0},
      "algorithms": [
        {"variant": "sparq", "expert_variance": 0.01,
         "queries": {"c": 6, "mcmc_scale": 1.0, "eta": 0.1}},
        {"variant": "gpucb"}, {"variant": "tvgpucb", "epsilon": 0.01},
        {"variant": "rgpucb"}, {"variant": "swgpucb", "window": 23},
        {"variant": "wgpucb", "gamma": 0.95}
      ]
    }

A top-level ``"kernel"`` block skips tuning and is used as is.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .algorithms import VARIANTS, AlgorithmConfig
from .environment import EnvironmentSpec, EnvironmentSpecError, load_csv_environment, synthetic_environment
from .kernel import KernelError, KernelSpec
from .sparse import QueryBudget


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


_ALIASES = {
    "sparq": "sparq", "sparqgpucb": "sparq",
    "gpucb": "gpucb",
    "tv": "tvgpucb", "tvgpucb": "tvgpucb",
    "r": "rgpucb", "rgpucb": "rgpucb",
    "sw": "swgpucb", "swgpucb": "swgpucb",
    "w": "wgpucb", "wgpucb": "wgpucb",
}


def normalize_variant(name: str) -> str:
    key = str(name).lower().replace("-", "").replace("_", "").replace(" ", "")
    if key not in _ALIASES:
        raise ConfigError(f"unknown algorithm variant {name!r}; expected one of {VARIANTS}")
    return _ALIASES[key]


@dataclass(frozen=True)
class TuningConfig:
    n_points: int = 200
    time: int = 0
    family: str = "se"
    lengthscales: tuple = (0.5, 1.0, 2.0, 4.0, 8.0)
    signal_variances: tuple = (0.25, 1.0, 4.0)
    seed: int = 0


@dataclass(frozen=True)
class BoundCurve:
    enabled: bool = True
    constant: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    environment: EnvironmentSpec
    algorithms: tuple
    horizon: int = 500
    realizations: int = 40
    base_seed: int = 0
    grid_resolution: int = 1001
    output_dir: str = "results"
    bound_curve: BoundCurve = field(default_factory=BoundCurve)
    delta: float = 0.05
    rkhs_bound: float = 2.0
    kernel: KernelSpec | None = None
    tuning: TuningConfig = field(default_factory=TuningConfig)
    explicit_kernels: frozenset = frozenset()

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.realizations < 1:
            raise ConfigError("realizations must be >= 1")
        if self.grid_resolution < 2:
            raise ConfigError("grid_resolution must be >= 2")
        if not self.algorithms:
            raise ConfigError("at least one algorithm is required")
        tags = [a.tag for a in self.algorithms]
        if len(set(tags)) != len(tags):
            raise ConfigError(f"algorithm tags must be unique, got {tags}")

    def with_kernel(self, spec: KernelSpec) -> "ExperimentConfig":
        """Install ``spec`` on every algorithm that has no explicit kernel."""
        algos = tuple(a if a.tag in self.explicit_kernels else replace(a, kernel=spec)
                      for a in self.algorithms)
        return replace(self, kernel=spec, algorithms=algos)

    def select(self, tags) -> "ExperimentConfig":
        wanted = list(tags)
        found = [a for a in self.algorithms if a.tag in wanted or a.variant in wanted]
        if not found:
            raise ConfigError(f"no algorithm matches {wanted}")
        return replace(self, algorithms=tuple(found))


def _get(d: dict, key: str, cast, default=None, allowed=None):
    if key not in d:
        return default
    value = d[key]
    try:
        out = cast(value)
    except (TypeError, ValueError):
        raise ConfigError(f"field {key!r}: cannot interpret {value!r}") from None
    if allowed is not None and out not in allowed:
        raise ConfigError(f"field {key!r}: {out!r} not in {allowed}")
    return out


def _check_keys(d: dict, allowed: set, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown fields in {where}: {sorted(extra)}")


def parse_environment(d: dict, base_dir: Path | None = None) -> EnvironmentSpec:
    _check_keys(d, {"kind", "bounds", "sigma2", "path", "interpolation"}, "environment")
    kind = str(d.get("kind", "synthetic")).lower()
    sigma2 = _get(d, "sigma2", float, 0.01)
    try:
        if kind == "synthetic":
            return synthetic_environment(d.get("bounds", [-50.0, 50.0]), sigma2)
        if kind == "csv":
            if "path" not in d:
                raise ConfigError("csv environment needs a 'path'")
            path = Path(d["path"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            return load_csv_environment(path, d.get("interpolation", "nearest"), sigma2)
    except EnvironmentSpecError as exc:
        raise ConfigError(f"environment: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"environment: cannot read {d.get('path')!r}: {exc}") from exc
    raise ConfigError(f"unknown environment kind {kind!r}")


def parse_algorithm(d: dict, *, sigma2: float, delta: float, rkhs_bound: float, horizon: int) -> AlgorithmConfig:
    _check_keys(d, {"variant", "name", "window", "epsilon", "gamma", "expert_variance", "queries",
                    "delta", "rkhs_bound", "kernel"}, "algorithm")
    if "variant" not in d:
        raise ConfigError("every algorithm needs a 'variant'")
    variant = normalize_variant(d["variant"])
    q = d.get("queries", {})
    _check_keys(q, {"c", "d", "mcmc_scale", "eta"}, "queries")
    try:
        kwargs = dict(
            variant=variant,
            name=d.get("name"),
            delta=_get(d, "delta", float, delta),
            rkhs_bound=_get(d, "rkhs_bound", float, rkhs_bound),
            sigma2=sigma2,
            window=_get(d, "window", int),
            epsilon=_get(d, "epsilon", float, 0.01),
            gamma=_get(d, "gamma", float, 0.95),
            expert_variance=_get(d, "expert_variance", float),
            budget=QueryBudget(_get(q, "c", float, 6.0), _get(q, "d", int, 1)),
            mcmc_scale=_get(q, "mcmc_scale", float, 1.0),
            eta=_get(q, "eta", float, 0.1),
        )
        if "kernel" in d:
            kwargs["kernel"] = KernelSpec.from_dict(d["kernel"])
        cfg = AlgorithmConfig(**kwargs).with_horizon(horizon)
    except (KernelError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"algorithm {d.get('variant')!r}: {exc}") from exc
    return cfg


def parse_config(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    _check_keys(raw, {"environment", "algorithms", "horizon", "T", "realizations", "base_seed",
                      "grid_resolution", "output_dir", "bound_curve", "delta", "rkhs_bound",
                      "kernel", "tuning"}, "config")
    env = parse_environment(raw.get("environment", {}), base_dir)
    horizon = _get(raw, "horizon", int, _get(raw, "T", int, 500))
    delta = _get(raw, "delta", float, 0.05)
    rkhs = _get(raw, "rkhs_bound", float, 2.0)
    algos_raw = raw.get("algorithms", [{"variant": v} for v in VARIANTS])
    if not isinstance(algos_raw, list):
        raise ConfigError("'algorithms' must be a list")
    algos = tuple(parse_algorithm(a, sigma2=env.sigma2, delta=delta, rkhs_bound=rkhs, horizon=horizon)
                  for a in algos_raw)
    bc = raw.get("bound_curve", {})
    _check_keys(bc, {"enabled", "constant"}, "bound_curve")
    tn = raw.get("tuning", {})
    _check_keys(tn, {"n_points", "time", "family", "lengthscales", "signal_variances", "seed"}, "tuning")
    try:
        tuning = TuningConfig(
            n_points=_get(tn, "n_points", int, 200),
            time=_get(tn, "time", int, 0),
            family=_get(tn, "family", str, "se", allowed=("se", "matern52")),
            lengthscales=tuple(float(v) for v in tn.get("lengthscales", TuningConfig.lengthscales)),
            signal_variances=tuple(float(v) for v in tn.get("signal_variances", TuningConfig.signal_variances)),
            seed=_get(tn, "seed", int, 0),
        )
        kernel = KernelSpec.from_dict(raw["kernel"]) if raw.get("kernel") is not None else None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if tuning.n_points < 1 or not tuning.lengthscales or not tuning.signal_variances:
        raise ConfigError("tuning needs n_points >= 1 and a nonempty grid")
    cfg = ExperimentConfig(
        environment=env,
        algorithms=algos,
        horizon=horizon,
        realizations=_get(raw, "realizations", int, 40),
        base_seed=_get(raw, "base_seed", int, 0),
        grid_resolution=_get(raw, "grid_resolution", int, 1001),
        output_dir=str(raw.get("output_dir", "results")),
        bound_curve=BoundCurve(bool(bc.get("enabled", True)), _get(bc, "constant", float, 1.0)),
        delta=delta,
        rkhs_bound=rkhs,
        kernel=kernel,
        tuning=tuning,
        explicit_kernels=frozenset(a.tag for a, r in zip(algos, algos_raw) if "kernel" in r),
    )
    if cfg.bound_curve.constant < 0:
        raise ConfigError("bound_curve.constant must be nonnegative")
    return cfg.with_kernel(kernel) if kernel is not None else cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {str(path)!r}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return parse_config(raw, path.parent)
