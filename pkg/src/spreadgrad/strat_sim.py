"""Stratified-diffusion invasion simulator.

Circular colonies grow at a region-dependent constant rate and found new
colonies a fixed distance beyond their edge. A query point's arrival time is
the first timestep at which any colony disk covers it; colonies never merge as
objects, so coalescence is implicit in the union-of-disks test.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .core import (DEFAULT_ALBERS, AlbersConfig, Location, WaitingTimeDataset,
                   project_albers, unproject_albers)

__all__ = [
    "Colony",
    "LongitudeSplitSpeed",
    "PAPER_COLONY_RATE",
    "SimConfig",
    "SimResult",
    "UniformSpeed",
    "hex_lattice",
    "paper_config",
    "paper_query_grid",
    "paper_scenario",
    "simulate",
]

KM_PER_DEGREE = 111.32
# 0.1 new colonies per year per degree of colony radius
PAPER_COLONY_RATE = 0.1 / KM_PER_DEGREE


class SpeedMap(Protocol):
    def speed_at(self, xy: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class UniformSpeed:
    c: float

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("speed must be positive")

    def speed_at(self, xy):
        return np.full(len(np.atleast_2d(xy)), float(self.c))

    def to_dict(self):
        return {"kind": "uniform", "c": self.c}


@dataclass(frozen=True)
class LongitudeSplitSpeed:
    """Speed ``west`` at longitudes below ``boundary_lon`` and ``east`` otherwise."""

    boundary_lon: float
    west: float
    east: float
    albers: AlbersConfig = DEFAULT_ALBERS

    def __post_init__(self):
        if not (self.west > 0 and self.east > 0):
            raise ValueError("speeds must be positive")

    def speed_at(self, xy):
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        lon, _ = unproject_albers(xy[:, 0], xy[:, 1], self.albers)
        return np.where(lon < self.boundary_lon, float(self.west), float(self.east))

    def to_dict(self):
        return {"kind": "longitude_split", "boundary_lon": self.boundary_lon,
                "west": self.west, "east": self.east}


def speed_map_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "uniform":
        return UniformSpeed(float(d["c"]))
    if kind == "longitude_split":
        return LongitudeSplitSpeed(float(d["boundary_lon"]), float(d["west"]), float(d["east"]))
    raise ValueError(f"unknown speed map kind {kind!r}")


@dataclass(frozen=True)
class Colony:
    center: Location
    radius: float
    birth_year: float
    parent: int | None = None


@dataclass(frozen=True)
class SimConfig:
    origin: Location
    start_year: float
    speed_map: SpeedMap
    colony_rate_coeff: float = PAPER_COLONY_RATE
    jump_distance: float = 10.0
    horizon: float = 107.0
    timestep: float = 1.0
    seeded_jumps: tuple[tuple[Location, float], ...] = ()
    seed: int = 0
    max_colonies: int = 2_000_000

    def __post_init__(self):
        object.__setattr__(self, "seeded_jumps", tuple(self.seeded_jumps))
        if self.colony_rate_coeff < 0:
            raise ValueError("colony_rate_coeff must be >= 0")
        if self.jump_distance < 0:
            raise ValueError("jump_distance must be >= 0")
        if not self.timestep > 0:
            raise ValueError("timestep must be > 0")
        if not self.horizon >= 0:
            raise ValueError("horizon must be >= 0")


@dataclass
class SimResult:
    query_points: np.ndarray
    arrival: np.ndarray  # NaN where never invaded within the horizon
    events: list[dict] = field(default_factory=list)

    def to_dataset(self, ids: Sequence[str] | None = None) -> WaitingTimeDataset:
        """Invaded query points as a waiting-time dataset (never-invaded points dropped)."""
        hit = np.isfinite(self.arrival)
        ids = list(ids) if ids is not None else [f"q{i}" for i in range(len(self.arrival))]
        idx = np.flatnonzero(hit)
        return WaitingTimeDataset.from_arrays(self.query_points[idx], self.arrival[idx],
                                              [ids[i] for i in idx])

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "x", "y", "year"])
            for i, (xy, t) in enumerate(zip(self.query_points, self.arrival)):
                if np.isfinite(t):
                    w.writerow([f"q{i}", repr(float(xy[0])), repr(float(xy[1])), repr(float(t))])

    def write_events(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")


def simulate(config: SimConfig, query_points) -> SimResult:
    """Run the stratified-diffusion model on an annual (or ``timestep``) grid.

    Each step: every colony's radius grows by ``c * dt`` (``c`` taken at the
    colony centre), then each colony founds ``Poisson(coeff * r * dt)``
    offspring at uniform angles, ``r + L`` from its centre. Seeded jumps
    enter at the first step whose time reaches their year.
    """
    q = np.asarray([[p.x, p.y] for p in query_points] if not isinstance(query_points, np.ndarray)
                   else query_points, dtype=float).reshape(-1, 2)
    rng = np.random.default_rng(config.seed)
    dt = config.timestep
    n_steps = int(math.floor(config.horizon / dt + 1e-9))

    cx: list[float] = []
    cy: list[float] = []
    speed_l: list[float] = []
    events: list[dict] = []
    radius = np.zeros(0)

    def add(xs, ys, t, parents, kind):
        nonlocal radius
        xs = np.atleast_1d(np.asarray(xs, dtype=float))
        ys = np.atleast_1d(np.asarray(ys, dtype=float))
        sp = config.speed_map.speed_at(np.column_stack([xs, ys]))
        start = len(cx)
        cx.extend(xs.tolist())
        cy.extend(ys.tolist())
        speed_l.extend(np.asarray(sp, dtype=float).tolist())
        radius = np.concatenate([radius, np.zeros(len(xs))])
        for k in range(len(xs)):
            events.append({"id": start + k, "kind": kind, "year": t,
                           "x": float(xs[k]), "y": float(ys[k]),
                           "parent": None if parents is None else int(parents[k])})

    pending = sorted(config.seeded_jumps, key=lambda j: j[1])
    t0 = float(config.start_year)
    add(config.origin.x, config.origin.y, t0, None, "origin")
    arrival = np.full(len(q), np.nan)

    def enter_seeded(t):
        while pending and pending[0][1] <= t + 1e-9:
            loc, _yr = pending.pop(0)
            add(loc.x, loc.y, t, None, "seeded")

    def cover(t):
        open_ = np.flatnonzero(np.isnan(arrival))
        if not len(open_):
            return
        X, Y = np.asarray(cx), np.asarray(cy)
        hit = np.zeros(len(open_), dtype=bool)
        for a in range(0, len(X), 20000):
            dx = q[open_, 0][:, None] - X[None, a:a + 20000]
            dy = q[open_, 1][:, None] - Y[None, a:a + 20000]
            r = radius[a:a + 20000]
            hit |= np.any(dx * dx + dy * dy <= (r * r)[None, :] + 1e-9, axis=1)
        arrival[open_[hit]] = t

    enter_seeded(t0)
    cover(t0)
    for step in range(1, n_steps + 1):
        t = t0 + step * dt
        radius += np.asarray(speed_l) * dt
        if config.colony_rate_coeff > 0:
            counts = rng.poisson(config.colony_rate_coeff * radius * dt)
            total = int(counts.sum())
            if total:
                if len(cx) + total > config.max_colonies:
                    raise RuntimeError(f"colony count exceeded {config.max_colonies} at t={t}")
                parents = np.repeat(np.arange(len(radius)), counts)
                angle = rng.uniform(0.0, 2.0 * math.pi, total)
                dist = radius[parents] + config.jump_distance
                px = np.asarray(cx)[parents] + dist * np.cos(angle)
                py = np.asarray(cy)[parents] + dist * np.sin(angle)
                add(px, py, t, parents, "offspring")
        enter_seeded(t)
        cover(t)
    return SimResult(q, arrival, events)


# --- the published scenario ------------------------------------------------

MASSACHUSETTS = (-71.8, 42.3)
MICHIGAN = (-84.6, 43.6)


def paper_config(seed: int = 0, colony_rate_coeff: float = PAPER_COLONY_RATE,
                 albers: AlbersConfig = DEFAULT_ALBERS) -> SimConfig:
    """Introduction in Massachusetts in 1900, jump to Michigan in 1950,
    10 km/yr east of 78W and 20 km/yr west of it, L = 10 km, 107 years."""
    return SimConfig(
        origin=project_albers(*MASSACHUSETTS, albers),
        start_year=1900.0,
        speed_map=LongitudeSplitSpeed(-78.0, west=20.0, east=10.0, albers=albers),
        colony_rate_coeff=colony_rate_coeff,
        jump_distance=10.0,
        horizon=107.0,
        timestep=1.0,
        seeded_jumps=((project_albers(*MICHIGAN, albers), 1950.0),),
        seed=seed,
    )


def hex_lattice(xmin: float, xmax: float, ymin: float, ymax: float, spacing: float) -> np.ndarray:
    """Points of a hexagonal lattice with nearest-neighbour distance ``spacing``."""
    dy = spacing * math.sqrt(3.0) / 2.0
    rows = []
    for j, y in enumerate(np.arange(ymin, ymax + 1e-9, dy)):
        off = 0.5 * spacing if j % 2 else 0.0
        xs = np.arange(xmin + off, xmax + 1e-9, spacing)
        rows.append(np.column_stack([xs, np.full(len(xs), y)]))
    return np.concatenate(rows) if rows else np.zeros((0, 2))


def paper_query_grid(spacing: float = 86.0, albers: AlbersConfig = DEFAULT_ALBERS) -> np.ndarray:
    """Synthetic county-centroid lattice over the north-eastern US extent
    (88W-69W, 37N-47.5N, as a projected rectangle)."""
    corners = project_albers(np.array([-88.0, -69.0, -88.0, -69.0]),
                             np.array([37.0, 37.0, 47.5, 47.5]), albers)
    xmin, xmax = corners[:, 0].min(), corners[:, 0].max()
    ymin, ymax = corners[:, 1].min(), corners[:, 1].max()
    return hex_lattice(xmin, xmax, ymin, ymax, spacing)


def paper_scenario(query_points=None, seed: int = 0, **overrides) -> SimResult:
    config = paper_config(seed=seed)
    if overrides:
        from dataclasses import replace
        config = replace(config, **overrides)
    if query_points is None:
        query_points = paper_query_grid()
    return simulate(config, query_points)
