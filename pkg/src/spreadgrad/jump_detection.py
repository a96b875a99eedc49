"""Candidate long-range-jump foci.

Two screens are provided. The Rayleigh scan flags locations whose
neighbouring spread directions look uniform on the circle (radial spread).
The box scan integrates the posterior gradient normal to each side of a box
and flags boxes the invasion leaves through at least two sides while
entering through none.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import spatial

from .core import Location, WaitingTimeDataset, pairwise_distances
from .gp_fit import PosteriorDraws
from .gradient_field import SpreadSummary, _DrawSolver, _draw_rngs, run_blocks

__all__ = [
    "BoxTestResult",
    "CurveGradientResult",
    "CurveSegment",
    "RayleighResult",
    "avg_normal_gradient",
    "box_jump_scan",
    "box_segments",
    "grid_centers",
    "rayleigh_scan",
    "rayleigh_test",
    "segment_gradient_draws",
]

SIDES = ("N", "E", "S", "W")
OUT, IN, NONE = "significantly_out", "significantly_in", "inconclusive"
_SHORT = {OUT: "out", IN: "in", NONE: "none"}


# --- Rayleigh --------------------------------------------------------------

def rayleigh_test(directions) -> tuple[float, float]:
    """Rayleigh uniformity test on unit vectors (``(n, 2)``) or angles (``(n,)``, radians).

    Returns ``(R, p)`` with ``R = 2 n rbar^2`` and ``p = exp(-R / 2)``, the
    chi-square(2) upper tail.
    """
    d = np.asarray(directions, dtype=float)
    if d.ndim == 1:
        d = np.column_stack([np.cos(d), np.sin(d)])
    n = len(d)
    if n < 2:
        raise ValueError(f"Rayleigh test needs at least 2 directions, got {n}")
    xbar, ybar = d.mean(axis=0)
    R = 2.0 * n * (xbar * xbar + ybar * ybar)
    return float(R), float(math.exp(-R / 2.0))


@dataclass(frozen=True)
class RayleighResult:
    center: Location
    n_neighbors: int
    R: float
    p_value: float
    flagged: bool
    tested: bool = True
    rejects: bool = False
    mean_speed: float | None = None


def rayleigh_scan(field: Sequence[SpreadSummary], radius: float = 100.0, alpha: float = 0.05,
                  min_neighbors: int = 3, speed_floor: float | str | None = "q25",
                  centers: np.ndarray | None = None) -> list[RayleighResult]:
    """Rayleigh test on mean directions of significant locations near each centre.

    A centre is flagged when the test does not reject uniformity at
    ``alpha``, at least ``min_neighbors`` significant locations lie within
    ``radius`` km, and their mean speed exceeds ``speed_floor`` (``"q25"``:
    the field-wide 25th percentile of significant median speeds; ``None``
    disables the floor). Centres default to the field locations.
    """
    if not field:
        raise ValueError("empty spread field")
    pts = np.array([[s.point.x, s.point.y] for s in field])
    sig = np.array([s.significant and s.direction_mean is not None for s in field])
    dirs = np.array([s.direction_mean if s.direction_mean is not None else (0.0, 0.0) for s in field])
    speeds = np.array([s.speed_median if s.speed_median is not None else np.nan for s in field])
    if speed_floor == "q25":
        floor = float(np.nanpercentile(speeds[sig], 25)) if sig.any() else 0.0
    elif speed_floor is None:
        floor = -math.inf
    else:
        floor = float(speed_floor)
    centers = pts if centers is None else np.asarray(centers, dtype=float).reshape(-1, 2)

    sig_idx = np.flatnonzero(sig)
    tree = spatial.cKDTree(pts[sig_idx]) if len(sig_idx) else None
    out = []
    for c in centers:
        nb = sig_idx[tree.query_ball_point(c, radius)] if tree is not None else np.zeros(0, int)
        nb = np.sort(nb)
        loc = Location(float(c[0]), float(c[1]))
        if len(nb) < max(min_neighbors, 2):
            out.append(RayleighResult(loc, len(nb), 0.0, 1.0, False, tested=False))
            continue
        R, p = rayleigh_test(dirs[nb])
        mean_speed = float(np.nanmean(speeds[nb]))
        flagged = p > alpha and mean_speed > floor
        out.append(RayleighResult(loc, len(nb), R, p, bool(flagged), True, p <= alpha, mean_speed))
    return out


# --- gradient normal to a segment -------------------------------------------

@dataclass(frozen=True)
class CurveSegment:
    start: Location
    end: Location
    outward_normal: tuple[float, float]

    def __post_init__(self):
        t = np.array([self.end.x - self.start.x, self.end.y - self.start.y])
        length = float(np.hypot(*t))
        if length == 0:
            raise ValueError("segment has zero length")
        nrm = np.asarray(self.outward_normal, dtype=float)
        if abs(np.hypot(*nrm) - 1.0) > 1e-9:
            raise ValueError("normal must be a unit vector")
        if abs(float(nrm @ t)) > 1e-9 * length:
            raise ValueError("normal must be orthogonal to the segment")

    @property
    def length(self) -> float:
        return float(math.hypot(self.end.x - self.start.x, self.end.y - self.start.y))

    def reversed(self) -> "CurveSegment":
        """Same segment traversed backwards with the opposite normal."""
        return CurveSegment(self.end, self.start, (-self.outward_normal[0], -self.outward_normal[1]))


@dataclass(frozen=True)
class CurveGradientResult:
    segment: CurveSegment
    avg_normal_gradient_draws: np.ndarray
    ci: tuple[float, float]
    classification: str
    cond_mean: np.ndarray | None = None
    cond_sd: np.ndarray | None = None


def _gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


class _SegmentGeometry:
    """Draw-independent quadrature geometry for straight segments.

    Along a straight segment the offset to a data point has a constant
    component along the normal, so the normal gradient covariance reduces to
    ``-sigma2 phi^2 h_j exp(-phi r)`` with ``h_j`` that offset. Node-pair
    offsets are parallel to the segment, so the normal-normal Hessian term is
    ``sigma2 phi^2 exp(-phi r)``. Its average over the unit square has a kink
    on the diagonal, so it is integrated in closed form rather than by
    quadrature.
    """

    def __init__(self, starts, ends, normals, coords, n_nodes):
        self.nodes, self.weights = _gauss_legendre(n_nodes)
        tang = ends - starts
        self.length = np.hypot(tang[:, 0], tang[:, 1])
        self.normals = normals
        self.h = np.einsum("snk,sk->sn", starts[:, None, :] - coords[None, :, :], normals)
        P = starts[:, None, :] + self.nodes[None, :, None] * tang[:, None, :]
        diff = P[:, :, None, :] - coords[None, None, :, :]
        self.r = np.sqrt(np.einsum("sqnk,sqnk->sqn", diff, diff))

    def conditionals(self, solver):
        """Conditional mean and variance of the arc-length averaged normal gradient."""
        sigma2, phi = solver.params.sigma2, solver.params.phi
        amp = sigma2 * phi * phi
        # cov(Y_j, average normal gradient)
        gamma = -amp * self.h * np.einsum("sqn,q->sn", np.exp(-phi * self.r), self.weights)
        mean = self.normals @ solver.grad_mu + gamma @ solver.weights
        W = solver.whiten(gamma.T)
        reduction = np.einsum("ns,ns->s", W, W)
        prior = amp * _mean_exp_abs(phi * self.length)
        return mean, np.maximum(prior - reduction, 0.0)


def _mean_exp_abs(a: np.ndarray) -> np.ndarray:
    """``int_0^1 int_0^1 exp(-a |s - t|) ds dt = 2 (a - 1 + exp(-a)) / a^2``."""
    a = np.asarray(a, dtype=float)
    small = a < 1e-4
    safe = np.where(small, 1.0, a)
    exact = 2.0 * (safe + np.expm1(-safe)) / safe**2
    return np.where(small, 1.0 - a / 3.0 + a * a / 12.0, exact)


def segment_gradient_draws(segments: Sequence[CurveSegment], dataset: WaitingTimeDataset,
                           draws: PosteriorDraws, n_nodes: int = 16, seed: int = 0,
                           chunk: int = 128, threads: int = 1):
    """Average normal gradient draws ``(S, m)`` plus conditional means and sds.

    The normal deviate for (segment ``i``, draw ``j``) is fixed by ``seed``,
    ``j`` and ``i``.
    """
    if n_nodes < 4:
        raise ValueError("at least 4 quadrature nodes are required")
    S = len(segments)
    m = len(draws)
    if S == 0:
        empty = np.zeros((0, m))
        return empty, empty, empty
    starts = np.array([[s.start.x, s.start.y] for s in segments])
    ends = np.array([[s.end.x, s.end.y] for s in segments])
    normals = np.array([s.outward_normal for s in segments], dtype=float)
    coords, years = dataset.coords, dataset.years
    D = pairwise_distances(coords)
    means = np.empty((S, m))
    var = np.empty((S, m))
    solvers = None
    if m * len(coords) ** 2 <= 2.5e7:
        solvers = [_DrawSolver(coords, years, D, theta) for theta in draws]

    def work(block: slice):
        for a in range(block.start, block.stop, chunk):
            sl = slice(a, min(a + chunk, block.stop))
            geom = _SegmentGeometry(starts[sl], ends[sl], normals[sl], coords, n_nodes)
            for j, theta in enumerate(draws):
                solver = solvers[j] if solvers is not None else _DrawSolver(coords, years, D, theta)
                means[sl, j], var[sl, j] = geom.conditionals(solver)

    run_blocks(work, S, threads, chunk)
    sds = np.sqrt(var)
    out = means + sds * _deviates(seed, S, m)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite curve-gradient quadrature")
    return out, means, sds


def _deviates(seed: int, S: int, m: int) -> np.ndarray:
    return np.column_stack([rng.standard_normal(S) for rng in _draw_rngs(seed, m)]) if m else np.zeros((S, 0))


def _classify(draws: np.ndarray, level: float) -> tuple[tuple[float, float], str]:
    a = 1.0 - level
    lo, hi = np.quantile(draws, [a / 2, 1 - a / 2])
    if lo > 0:
        cls = OUT
    elif hi < 0:
        cls = IN
    else:
        cls = NONE
    return (float(lo), float(hi)), cls


def avg_normal_gradient(segment: CurveSegment, dataset: WaitingTimeDataset, draws: PosteriorDraws,
                        n_nodes: int = 16, seed: int = 0, level: float = 0.95) -> CurveGradientResult:
    """Posterior draws of the gradient normal to ``segment``, averaged over its length."""
    g, mu, sd = segment_gradient_draws([segment], dataset, draws, n_nodes, seed)
    ci, cls = _classify(g[0], level)
    return CurveGradientResult(segment, g[0], ci, cls, mu[0], sd[0])


# --- box scan -----------------------------------------------------------------

@dataclass(frozen=True)
class BoxTestResult:
    center: Location
    side: float
    sides: tuple[CurveGradientResult, ...]
    flagged: bool

    @property
    def classifications(self) -> dict[str, str]:
        return {k: r.classification for k, r in zip(SIDES, self.sides)}


def box_segments(center: Location, side: float) -> list[CurveSegment]:
    """Sides N, E, S, W of a square box with outward normals."""
    h = 0.5 * side
    cx, cy = center.x, center.y
    ne, nw = Location(cx + h, cy + h), Location(cx - h, cy + h)
    se, sw = Location(cx + h, cy - h), Location(cx - h, cy - h)
    return [CurveSegment(nw, ne, (0.0, 1.0)), CurveSegment(ne, se, (1.0, 0.0)),
            CurveSegment(se, sw, (0.0, -1.0)), CurveSegment(sw, nw, (-1.0, 0.0))]


def grid_centers(dataset: WaitingTimeDataset, spacing: float) -> np.ndarray:
    """Square grid over the data bounding box, kept where inside the data's convex hull."""
    xy = dataset.coords
    if len(xy) < 3:
        return np.zeros((0, 2))
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    xs = np.arange(lo[0], hi[0] + 1e-9, spacing)
    ys = np.arange(lo[1], hi[1] + 1e-9, spacing)
    G = np.array([(x, y) for y in ys for x in xs]).reshape(-1, 2)
    try:
        hull = spatial.Delaunay(xy)
    except spatial.QhullError:
        return np.zeros((0, 2))
    return G[hull.find_simplex(G) >= 0]


def flag_rule(classes: Sequence[str]) -> bool:
    """Out through at least two sides and in through none."""
    return sum(c == OUT for c in classes) >= 2 and not any(c == IN for c in classes)


def box_jump_scan(dataset: WaitingTimeDataset, draws: PosteriorDraws, grid: float = 50.0,
                  box_side: float = 100.0, seed: int = 0, n_nodes: int = 16,
                  level: float = 0.95, centers: np.ndarray | None = None,
                  threads: int = 1) -> list[BoxTestResult]:
    """Box test at every grid centre (default: :func:`grid_centers` with spacing ``grid``)."""
    if centers is None:
        centers = grid_centers(dataset, grid)
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    locs = [Location(float(x), float(y)) for x, y in centers]
    segs = [s for c in locs for s in box_segments(c, box_side)]
    g, mu, sd = segment_gradient_draws(segs, dataset, draws, n_nodes, seed, threads=threads)
    out = []
    for i, c in enumerate(locs):
        res = []
        for k in range(4):
            row = 4 * i + k
            ci, cls = _classify(g[row], level)
            res.append(CurveGradientResult(segs[row], g[row], ci, cls, mu[row], sd[row]))
        out.append(BoxTestResult(c, box_side, tuple(res), flag_rule([r.classification for r in res])))
    return out


JUMP_COLUMNS = ("center_x", "center_y", "rayleigh_R", "rayleigh_p", "n_neighbors",
                "N", "E", "S", "W", "flagged_rayleigh", "flagged_box")


def save_jumps_csv(boxes: Sequence[BoxTestResult], rayleigh: Sequence[RayleighResult], path) -> None:
    """One row per grid centre; ``rayleigh`` must be evaluated at the same centres."""
    if len(boxes) != len(rayleigh):
        raise ValueError("box and Rayleigh results must align")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(JUMP_COLUMNS)
        for b, r in zip(boxes, rayleigh):
            w.writerow([repr(b.center.x), repr(b.center.y),
                        repr(r.R) if r.tested else "", repr(r.p_value) if r.tested else "",
                        r.n_neighbors, *(_SHORT[b.classifications[k]] for k in SIDES),
                        int(r.flagged), int(b.flagged)])
