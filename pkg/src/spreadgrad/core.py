"""Spatial data model, Albers projection and CSV ingestion.

Coordinates are kilometres after projection and years are calendar years, so
every gradient downstream is in years/km and every speed in km/year.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "AlbersConfig",
    "DataError",
    "Location",
    "WaitingTimeDataset",
    "WaitingTimeObservation",
    "load_dataset",
    "pairwise_distances",
    "project_albers",
    "save_dataset",
    "unproject_albers",
]

DUPLICATE_JITTER_KM = 1e-6


class DataError(ValueError):
    """Raised for malformed input data (missing files, columns, bad cells)."""


@dataclass(frozen=True)
class Location:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite coordinates ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


@dataclass(frozen=True)
class WaitingTimeObservation:
    id: str
    loc: Location
    year: float
    covariates: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.year):
            raise ValueError(f"observation {self.id!r}: non-finite year")


@dataclass(frozen=True)
class WaitingTimeDataset:
    """Ordered, immutable collection of waiting-time observations.

    ``n_dropped`` and ``n_jittered`` record what ingestion did to the raw rows.
    """

    observations: tuple[WaitingTimeObservation, ...]
    n_dropped: int = 0
    n_jittered: int = 0

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        names = self.covariate_names
        for obs in self.observations:
            if tuple(obs.covariates) != names:
                raise ValueError(f"observation {obs.id!r} has covariates "
                                 f"{tuple(obs.covariates)}, expected {names}")

    @classmethod
    def from_arrays(cls, coords, years, ids=None, covariates=None):
        coords = np.asarray(coords, dtype=float).reshape(-1, 2)
        years = np.asarray(years, dtype=float).ravel()
        if len(coords) != len(years):
            raise ValueError("coords and years differ in length")
        if ids is None:
            ids = [str(i) for i in range(len(years))]
        covariates = {k: np.asarray(v, dtype=float) for k, v in (covariates or {}).items()}
        obs = []
        for i, (xy, yr) in enumerate(zip(coords, years)):
            cov = {k: float(v[i]) for k, v in covariates.items()}
            obs.append(WaitingTimeObservation(str(ids[i]), Location(float(xy[0]), float(xy[1])),
                                              float(yr), cov))
        return cls(tuple(obs))

    @property
    def n(self) -> int:
        return len(self.observations)

    def __len__(self):
        return self.n

    @property
    def ids(self) -> list[str]:
        return [o.id for o in self.observations]

    @property
    def coords(self) -> np.ndarray:
        """(n, 2) array of x, y in km."""
        return np.array([[o.loc.x, o.loc.y] for o in self.observations], dtype=float).reshape(-1, 2)

    @property
    def years(self) -> np.ndarray:
        return np.array([o.year for o in self.observations], dtype=float)

    @property
    def covariate_names(self) -> tuple[str, ...]:
        if not self.observations:
            return ()
        return tuple(self.observations[0].covariates)

    def covariate(self, name: str) -> np.ndarray:
        if name not in self.covariate_names:
            raise KeyError(f"covariate {name!r} not in dataset (have {self.covariate_names})")
        return np.array([o.covariates[name] for o in self.observations], dtype=float)

    def subset(self, index: Iterable[int]) -> "WaitingTimeDataset":
        return WaitingTimeDataset(tuple(self.observations[i] for i in index))


def pairwise_distances(dataset_or_coords) -> np.ndarray:
    """Euclidean distance matrix (km) between all pairs of locations."""
    if isinstance(dataset_or_coords, WaitingTimeDataset):
        xy = dataset_or_coords.coords
    else:
        xy = np.asarray(dataset_or_coords, dtype=float).reshape(-1, 2)
    diff = xy[:, None, :] - xy[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(d, 0.0)
    return d


# --- Albers equal-area conic on a sphere -------------------------------------

@dataclass(frozen=True)
class AlbersConfig:
    lat1: float = 29.5
    lat2: float = 45.5
    lon0: float = -96.0
    lat0: float = 23.0
    radius_km: float = 6371.0088

    @property
    def _consts(self):
        p1, p2, p0 = (math.radians(v) for v in (self.lat1, self.lat2, self.lat0))
        n = 0.5 * (math.sin(p1) + math.sin(p2))
        c = math.cos(p1) ** 2 + 2.0 * n * math.sin(p1)
        rho0 = self.radius_km * math.sqrt(c - 2.0 * n * math.sin(p0)) / n
        return n, c, rho0


DEFAULT_ALBERS = AlbersConfig()


def project_albers(lon, lat, config: AlbersConfig = DEFAULT_ALBERS):
    """Project degrees to Albers equal-area km.

    Scalars return a :class:`Location`; arrays return an ``(..., 2)`` array.
    """
    lon_a = np.asarray(lon, dtype=float)
    lat_a = np.asarray(lat, dtype=float)
    if np.any(~np.isfinite(lon_a)) or np.any(~np.isfinite(lat_a)):
        raise ValueError("non-finite longitude/latitude")
    if np.any(np.abs(lon_a) > 180.0):
        raise ValueError("longitude outside [-180, 180]")
    if np.any(np.abs(lat_a) >= 90.0):
        raise ValueError("latitude outside (-90, 90)")
    n, c, rho0 = config._consts
    rho = config.radius_km * np.sqrt(c - 2.0 * n * np.sin(np.radians(lat_a))) / n
    theta = n * np.radians(lon_a - config.lon0)
    x = rho * np.sin(theta)
    y = rho0 - rho * np.cos(theta)
    if lon_a.ndim == 0 and lat_a.ndim == 0:
        return Location(float(x), float(y))
    return np.stack([x, y], axis=-1)


def unproject_albers(x, y, config: AlbersConfig = DEFAULT_ALBERS):
    """Inverse of :func:`project_albers`; returns ``(lon, lat)`` in degrees."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, c, rho0 = config._consts
    rho = np.hypot(x, rho0 - y)
    theta = np.arctan2(x, rho0 - y)
    sin_lat = (c - (rho * n / config.radius_km) ** 2) / (2.0 * n)
    lat = np.degrees(np.arcsin(np.clip(sin_lat, -1.0, 1.0)))
    lon = config.lon0 + np.degrees(theta / n)
    return lon, lat


# --- CSV ------------------------------------------------------------------

_REQUIRED_KEYS = ("id", "year")


def _parse_float(cell: str, row: int, column: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"row {row}, column {column!r}: cannot parse {cell!r} as a number") from None


def load_dataset(path, schema: Mapping[str, str] | None = None, *,
                 covariates: Sequence[str] | None = None,
                 project: bool = False,
                 albers: AlbersConfig = DEFAULT_ALBERS,
                 seed: int = 0) -> WaitingTimeDataset:
    """Read a waiting-time CSV.

    Parameters
    ----------
    path : path to a UTF-8 CSV file with a header row.
    schema : mapping from logical names to column names. Logical names are
        ``id``, ``year`` and either ``x``/``y`` (km) or ``lon``/``lat``
        (degrees, requires ``project=True``). Defaults to identity names.
    covariates : extra numeric columns to carry along. ``None`` keeps every
        column not referenced by the schema.
    project : project ``lon``/``lat`` with Albers equal-area.
    seed : seeds the duplicate-coordinate jitter.

    Rows with an empty year are dropped; the count is stored on the returned
    dataset as ``n_dropped`` and reported with a warning. Later rows that
    repeat an earlier coordinate are jittered by ``1e-6`` km.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"input file not found: {path}")
    schema = dict(schema or {})
    for key in ("id", "year"):
        schema.setdefault(key, key)
    if project:
        schema.setdefault("lon", "lon")
        schema.setdefault("lat", "lat")
        coord_keys = ("lon", "lat")
    else:
        schema.setdefault("x", "x")
        schema.setdefault("y", "y")
        coord_keys = ("x", "y")

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [schema[k] for k in _REQUIRED_KEYS + coord_keys]
        missing = [c for c in needed if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}; header is {header}")
        used = set(schema.values())
        cov_names = list(covariates) if covariates is not None else [c for c in header if c not in used]
        missing = [c for c in cov_names if c not in header]
        if missing:
            raise DataError(f"{path}: missing covariate column(s) {missing}")

        ids, xs, ys, years, covs = [], [], [], [], []
        dropped = 0
        for row_no, row in enumerate(reader, start=2):
            if row[schema["year"]] is None or row[schema["year"]].strip() == "":
                dropped += 1
                continue
            years.append(_parse_float(row[schema["year"]], row_no, schema["year"]))
            xs.append(_parse_float(row[schema[coord_keys[0]]], row_no, schema[coord_keys[0]]))
            ys.append(_parse_float(row[schema[coord_keys[1]]], row_no, schema[coord_keys[1]]))
            ids.append(row[schema["id"]])
            covs.append([_parse_float(row[c], row_no, c) for c in cov_names])

    if dropped:
        warnings.warn(f"{path}: dropped {dropped} row(s) with missing year", stacklevel=2)
    if project:
        xy = project_albers(np.array(xs), np.array(ys), albers).reshape(-1, 2)
    else:
        xy = np.column_stack([xs, ys]).reshape(-1, 2)
    for j, v in enumerate(years):
        if not math.isfinite(v):
            raise DataError(f"row {j + 2}: non-finite year")
    if not np.all(np.isfinite(xy)):
        raise DataError(f"{path}: non-finite coordinates")

    xy, n_jit = _jitter_duplicates(xy, seed)
    if n_jit:
        warnings.warn(f"{path}: jittered {n_jit} duplicate coordinate(s)", stacklevel=2)
    cov_arr = np.asarray(covs, dtype=float).reshape(len(ids), len(cov_names))
    obs = tuple(
        WaitingTimeObservation(ids[i], Location(float(xy[i, 0]), float(xy[i, 1])), years[i],
                               {c: float(cov_arr[i, j]) for j, c in enumerate(cov_names)})
        for i in range(len(ids))
    )
    return WaitingTimeDataset(obs, n_dropped=dropped, n_jittered=n_jit)


def _jitter_duplicates(xy: np.ndarray, seed: int) -> tuple[np.ndarray, int]:
    xy = xy.copy()
    rng = np.random.default_rng(seed)
    seen: set[tuple[float, float]] = set()
    n_jit = 0
    for i in range(len(xy)):
        key = (xy[i, 0], xy[i, 1])
        while key in seen:
            angle = rng.uniform(0.0, 2.0 * np.pi)
            xy[i] += DUPLICATE_JITTER_KM * np.array([np.cos(angle), np.sin(angle)])
            key = (xy[i, 0], xy[i, 1])
            n_jit += 1
        seen.add(key)
    return xy, n_jit


def save_dataset(dataset: WaitingTimeDataset, path) -> None:
    """Write ``id,x,y,year[,covariates...]``; floats use ``repr`` so reloads are exact."""
    path = Path(path)
    names = dataset.covariate_names
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y", "year", *names])
        for o in dataset.observations:
            w.writerow([o.id, repr(o.loc.x), repr(o.loc.y), repr(o.year),
                        *(repr(o.covariates[c]) for c in names)])
