"""Time-varying reward environments and the ground truth used for regret.

Two kinds are supported:

* ``synthetic`` -- the drifting bump
  ``exp(-0.05 (x - 5 sin(0.1 t))^2) + 0.5 cos(0.2 x) + 1.5`` on a box
  (only the first coordinate enters the formula);
* ``csv`` -- a finite set of sensors with one value per day, read from a
  ``location_id,lon,lat,day,value`` file. Step ``t`` (1-based) reads day
  ``first_day + t - 1``; sensors are the arms.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernel import as_point, as_points

CSV_HEADER = ("location_id", "lon", "lat", "day", "value")
MAX_GRID_POINTS = 1_000_000


class EnvironmentSpecError(ValueError):
    """Invalid environment definition or out-of-range lookup."""


class CsvFormatError(EnvironmentSpecError):
    """Malformed environment CSV file."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class EnvironmentSpec:
    """Reward environment.

    ``bounds`` has shape ``(d, 2)`` with rows ``(low, high)``.  For CSV
    environments ``locations`` holds the sensor coordinates, ``series`` the
    ``(n_sensors, n_days)`` table of values and ``first_day`` the day read at
    step 1.
    """

    kind: str
    bounds: np.ndarray
    sigma2: float
    location_ids: tuple = ()
    locations: np.ndarray | None = None
    series: np.ndarray | None = None
    first_day: int = 0
    source: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("synthetic", "csv"):
            raise EnvironmentSpecError(f"unknown environment kind {self.kind!r}")
        b = np.asarray(self.bounds, dtype=float)
        if b.ndim == 1 and b.size == 2:
            b = b.reshape(1, 2)
        if b.ndim != 2 or b.shape[1] != 2 or b.shape[0] < 1 or np.any(b[:, 0] > b[:, 1]):
            raise EnvironmentSpecError(f"bounds must be a nonempty list of (low, high) pairs, got {self.bounds!r}")
        object.__setattr__(self, "bounds", b)
        if not self.sigma2 > 0:
            raise EnvironmentSpecError(f"sigma2 must be positive, got {self.sigma2}")
        if self.kind == "csv" and (self.series is None or self.locations is None):
            raise EnvironmentSpecError("csv environments need locations and a value series")

    @property
    def dim(self) -> int:
        return self.bounds.shape[0]

    @property
    def n_days(self) -> int:
        return 0 if self.series is None else self.series.shape[1]


def synthetic_environment(bounds=(-50.0, 50.0), sigma2: float = 0.01) -> EnvironmentSpec:
    return EnvironmentSpec("synthetic", np.asarray(bounds, dtype=float), float(sigma2))


def _synthetic(x0: np.ndarray, t: float) -> np.ndarray:
    return np.exp(-0.05 * (x0 - 5.0 * np.sin(0.1 * t)) ** 2) + 0.5 * np.cos(0.2 * x0) + 1.5


def _check_inside(spec: EnvironmentSpec, X: np.ndarray):
    tol = 1e-9 * (1.0 + np.abs(spec.bounds).max())
    if np.any(X < spec.bounds[:, 0] - tol) or np.any(X > spec.bounds[:, 1] + tol):
        raise EnvironmentSpecError("query point outside the environment domain")


def _day_index(spec: EnvironmentSpec, t) -> int:
    k = int(t) - 1
    if int(t) != t or k < 0 or k >= spec.n_days:
        raise EnvironmentSpecError(
            f"time step {t} outside the stored series (steps 1..{spec.n_days}, "
            f"days {spec.first_day}..{spec.first_day + spec.n_days - 1})"
        )
    return k


def _sensor_index(spec: EnvironmentSpec, X: np.ndarray) -> np.ndarray:
    d2 = ((X[:, None, :] - spec.locations[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def true_values(spec: EnvironmentSpec, X, t) -> np.ndarray:
    """Noise-free reward ``f_t`` at every row of ``X``."""
    X = as_points(X, spec.dim)
    _check_inside(spec, X)
    if spec.kind == "synthetic":
        return _synthetic(X[:, 0], float(t))
    k = _day_index(spec, t)
    return spec.series[_sensor_index(spec, X), k]


def true_value(spec: EnvironmentSpec, x, t) -> float:
    x = as_point(x, spec.dim)
    return float(true_values(spec, x[None, :], t)[0])


def sample(spec: EnvironmentSpec, x, t, rng: np.random.Generator) -> float:
    """Noisy bandit feedback ``f_t(x) + N(0, sigma2)``; one draw from ``rng``."""
    return true_value(spec, x, t) + float(np.sqrt(spec.sigma2) * rng.standard_normal())


def expert_query(spec: EnvironmentSpec, X, t, expert_variance: float, rng: np.random.Generator) -> np.ndarray:
    """Expert answers ``f_t(X) + N(0, expert_variance)``; exactly ``len(X)`` draws from ``rng``.

    ``rng`` must be the expert substream, distinct from the sampling stream.
    """
    if expert_variance < 0:
        raise EnvironmentSpecError("expert variance must be nonnegative")
    X = as_points(X, spec.dim)
    f = true_values(spec, X, t) if X.shape[0] else np.zeros(0)
    return f + np.sqrt(expert_variance) * rng.standard_normal(X.shape[0])


def decision_grid(spec: EnvironmentSpec, resolution: int) -> np.ndarray:
    """Finite action set: a tensor-product linspace (inclusive of both
    bounds) for synthetic boxes, the sensor set for CSV environments."""
    if spec.kind == "csv":
        return spec.locations.copy()
    if resolution < 2:
        raise EnvironmentSpecError("grid resolution must be at least 2")
    if resolution**spec.dim > MAX_GRID_POINTS:
        raise EnvironmentSpecError(f"grid of {resolution}^{spec.dim} points exceeds {MAX_GRID_POINTS}")
    axes = [np.linspace(lo, hi, resolution) for lo, hi in spec.bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def instant_optimum(spec: EnvironmentSpec, t, grid) -> tuple[np.ndarray, float]:
    """Best grid point for ``f_t`` and its value; lowest index on ties."""
    grid = as_points(grid, spec.dim)
    if grid.shape[0] == 0:
        raise EnvironmentSpecError("grid is empty")
    f = true_values(spec, grid, t)
    k = int(np.argmax(f))
    return grid[k].copy(), float(f[k])


def load_csv_environment(path, interpolation: str = "nearest", sigma2: float = 0.01) -> EnvironmentSpec:
    """Read a sensor-by-day series.

    Days must be integers. Under ``"nearest"`` a missing (sensor, day) is
    filled from that sensor's nearest earlier day, or its nearest later day
    when no earlier value exists.
    """
    if interpolation != "nearest":
        raise EnvironmentSpecError(f"unsupported interpolation mode {interpolation!r}")
    path = Path(path)
    records = {}
    coords = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CsvFormatError("empty file", 1)
        header = [h.strip() for h in header]
        for pos, (got, want) in enumerate(zip(header, CSV_HEADER)):
            if got != want:
                raise CsvFormatError(f"column {pos + 1} is {got!r}, expected {want!r}", 1)
        if len(header) != len(CSV_HEADER):
            extra = header[len(CSV_HEADER):] or ["<missing>"]
            raise CsvFormatError(f"expected {len(CSV_HEADER)} columns, offending column {extra[0]!r}", 1)
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(CSV_HEADER):
                raise CsvFormatError(f"expected {len(CSV_HEADER)} fields, got {len(row)}", line)
            sid = row[0].strip()
            try:
                lon, lat, value = float(row[1]), float(row[2]), float(row[4])
                day = int(row[3])
            except ValueError as exc:
                raise CsvFormatError(str(exc), line) from None
            if not all(np.isfinite([lon, lat, value])):
                raise CsvFormatError("non-finite number", line)
            if sid in coords and coords[sid] != (lon, lat):
                raise CsvFormatError(f"sensor {sid!r} changes coordinates", line)
            coords[sid] = (lon, lat)
            if (sid, day) in records:
                raise CsvFormatError(f"duplicate entry for sensor {sid!r} on day {day}", line)
            records[(sid, day)] = value
    if not records:
        raise CsvFormatError("no data rows")
    ids = tuple(sorted(coords))
    days = [d for _, d in records]
    first, last = min(days), max(days)
    series = np.full((len(ids), last - first + 1), np.nan)
    for (sid, day), value in records.items():
        series[ids.index(sid), day - first] = value
    for row in series:
        known = np.flatnonzero(~np.isnan(row))
        for k in np.flatnonzero(np.isnan(row)):
            prior = known[known < k]
            row[k] = row[prior[-1]] if prior.size else row[known[known > k][0]]
    locs = np.array([coords[s] for s in ids], dtype=float)
    bounds = np.stack([locs.min(axis=0), locs.max(axis=0)], axis=1)
    return EnvironmentSpec("csv", bounds, float(sigma2), ids, locs, series, first, str(path))
