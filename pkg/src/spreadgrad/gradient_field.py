"""Posterior gradient of the waiting-time surface and derived spread summaries.

Given parameter draw ``theta`` and data ``Y`` at locations ``s_i``, the
gradient at ``s0`` is bivariate normal with

    mean = (b1, b2) + G^T C^{-1} (Y - mu)
    cov  = sigma2 phi^2 I - G^T C^{-1} G

where ``C = K(D) + tau2 I`` and ``G[i] = gradK(s0 - s_i)`` is ``cov(Y_i, grad Y(s0))``.
One gradient is drawn per parameter draw (sampling by composition).
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg, stats

from .core import Location, WaitingTimeDataset, pairwise_distances
from .gp_fit import PosteriorDraws
from .kernels import MaternParams, cholesky_jitter, matern32, matern32_grad

__all__ = [
    "GradientSample",
    "SpreadSummary",
    "conditional_gradients",
    "gradient_posterior",
    "gradient_posterior_mean",
    "save_spread_csv",
    "spread_field",
    "summarize_spread",
]

SPREAD_COLUMNS = ("id", "x", "y", "grad_x_mean", "grad_y_mean", "speed_median",
                  "speed_lo", "speed_hi", "direction_deg", "significant")


@dataclass(frozen=True)
class GradientSample:
    point: Location
    grads: np.ndarray  # (m, 2) years/km


@dataclass(frozen=True)
class SpreadSummary:
    point: Location
    speed_median: float | None
    speed_ci: tuple[float, float] | None
    direction_mean: tuple[float, float] | None
    direction_ci_halfwidth: float | None
    significant: bool
    grad_mean: tuple[float, float] = (0.0, 0.0)
    speed_mean: float | None = None

    @property
    def direction_deg(self) -> float | None:
        if self.direction_mean is None:
            return None
        return math.degrees(math.atan2(self.direction_mean[1], self.direction_mean[0]))


class _DrawSolver:
    """Per-draw Cholesky of the data covariance and the weights ``C^{-1}(Y - mu)``."""

    def __init__(self, coords: np.ndarray, years: np.ndarray, D: np.ndarray, theta):
        self.params = theta.cov
        C = matern32(D, self.params) + self.params.tau2 * np.eye(len(D))
        self.L = cholesky_jitter(C, scale=self.params.sigma2)
        resid = years - (theta.mean.beta0 + coords @ np.array([theta.mean.beta1, theta.mean.beta2]))
        self.weights = linalg.cho_solve((self.L, True), resid, check_finite=False)
        self.grad_mu = np.array([theta.mean.beta1, theta.mean.beta2])

    def whiten(self, A: np.ndarray) -> np.ndarray:
        return linalg.solve_triangular(self.L, A, lower=True, check_finite=False)


def conditional_gradients(points: np.ndarray, coords: np.ndarray, solver: _DrawSolver):
    """Conditional means ``(p, 2)`` and covariances ``(p, 2, 2)`` at ``points``."""
    params: MaternParams = solver.params
    delta = points[:, None, :] - coords[None, :, :]          # (p, n, 2)
    G = matern32_grad(delta, params)                          # cov(Y_i, grad Y(s0))
    mean = solver.grad_mu + np.einsum("pnk,n->pk", G, solver.weights)
    p, n = G.shape[:2]
    W = solver.whiten(G.transpose(1, 0, 2).reshape(n, 2 * p)).reshape(n, p, 2)
    reduction = np.einsum("npa,npb->pab", W, W)
    prior = params.sigma2 * params.phi**2 * np.eye(2)
    cov = prior - reduction
    cov = 0.5 * (cov + cov.transpose(0, 2, 1))
    return mean, cov


def _sample_2d(mean: np.ndarray, cov: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Draw ``mean + A z`` for each point with ``A A^T = cov`` (PSD-safe)."""
    w, V = np.linalg.eigh(cov)
    A = V * np.sqrt(np.clip(w, 0.0, None))[:, None, :]
    return mean + np.einsum("pab,pb->pa", A, z)


def _draw_rngs(seed: int, n_draws: int):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(n_draws)]


def _sample_points(points: np.ndarray, dataset: WaitingTimeDataset, draws: PosteriorDraws,
                   seed: int, chunk: int = 64, threads: int = 1) -> np.ndarray:
    """Gradient draws ``(p, m, 2)``.

    The normal deviate for (point ``i``, draw ``j``) depends only on ``seed``,
    ``j`` and ``i``, so results do not depend on chunking or thread count.
    """
    coords = dataset.coords
    years = dataset.years
    D = pairwise_distances(coords)
    p = len(points)
    m = len(draws)
    Z = np.stack([rng.standard_normal((p, 2)) for rng in _draw_rngs(seed, m)]) if m else np.zeros((0, p, 2))
    out = np.empty((p, m, 2))

    def work(block: slice):
        for j, theta in enumerate(draws):
            solver = _DrawSolver(coords, years, D, theta)
            for a in range(block.start, block.stop, chunk):
                sl = slice(a, min(a + chunk, block.stop))
                mean, cov = conditional_gradients(points[sl], coords, solver)
                out[sl, j] = _sample_2d(mean, cov, Z[j, sl])

    run_blocks(work, p, threads, chunk)
    return out


def run_blocks(work, n: int, threads: int, chunk: int = 1) -> None:
    """Call ``work(slice)`` on up to ``threads`` contiguous blocks covering ``range(n)``.

    Block edges fall on multiples of ``chunk`` so that a worker iterating in
    steps of ``chunk`` sees the same sub-slices whatever the thread count.
    """
    n_chunks = -(-n // chunk)
    threads = max(1, min(int(threads), n_chunks))
    edges = np.linspace(0, n_chunks, threads + 1).round().astype(int) * chunk
    edges[-1] = n
    blocks = [slice(int(a), int(min(b, n))) for a, b in zip(edges[:-1], edges[1:]) if min(b, n) > a]
    if threads == 1:
        for b in blocks:
            work(b)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for f in [pool.submit(work, b) for b in blocks]:
            f.result()


def gradient_posterior(point: Location, dataset: WaitingTimeDataset, draws: PosteriorDraws,
                       seed: int = 0) -> GradientSample:
    """One gradient sample per parameter draw at ``point``."""
    if len(draws) == 0:
        raise ValueError("no posterior draws")
    g = _sample_points(point.as_array()[None, :], dataset, draws, seed)
    return GradientSample(point, g[0])


def gradient_posterior_mean(points, dataset: WaitingTimeDataset, draws: PosteriorDraws) -> np.ndarray:
    """Posterior mean gradient ``(p, 2)``: conditional means averaged over draws."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    coords, years = dataset.coords, dataset.years
    D = pairwise_distances(coords)
    total = np.zeros((len(pts), 2))
    for theta in draws:
        solver = _DrawSolver(coords, years, D, theta)
        G = matern32_grad(pts[:, None, :] - coords[None, :, :], solver.params)
        total += solver.grad_mu + np.einsum("pnk,n->pk", G, solver.weights)
    return total / max(len(draws), 1)


def summarize_spread(sample: GradientSample, level: float = 0.95) -> SpreadSummary:
    """Speed (``1/|g|``) and direction summaries of a gradient sample.

    Significance: the origin lies outside the ``level`` Mahalanobis ellipse
    of the gradient draws.
    """
    g = np.asarray(sample.grads, dtype=float)
    if len(g) < 100:
        raise ValueError(f"need at least 100 gradient draws, got {len(g)}")
    gm = g.mean(axis=0)
    norms = np.hypot(g[:, 0], g[:, 1])
    if np.all(norms == 0):
        return SpreadSummary(sample.point, None, None, None, None, False, (0.0, 0.0))
    ok = norms > 0
    speeds = 1.0 / norms[ok]
    alpha = 1.0 - level
    lo, med, hi = np.quantile(speeds, [alpha / 2, 0.5, 1 - alpha / 2])

    units = g[ok] / norms[ok, None]
    resultant = units.mean(axis=0)
    rbar = float(np.hypot(*resultant))
    if rbar > 0:
        direction = (float(resultant[0] / rbar), float(resultant[1] / rbar))
        circ_sd = math.sqrt(-2.0 * math.log(min(rbar, 1.0))) if rbar < 1 else 0.0
        halfwidth = min(math.pi, stats.norm.ppf(1 - alpha / 2) * circ_sd)
    else:
        direction, halfwidth = None, math.pi

    S = np.cov(g.T)
    crit = stats.chi2.ppf(level, df=2)
    try:
        d2 = float(gm @ np.linalg.solve(S, gm))
    except np.linalg.LinAlgError:
        d2 = math.inf if np.any(gm != 0) else 0.0
    if not np.isfinite(d2) and not np.any(gm != 0):
        d2 = 0.0
    significant = bool(d2 > crit)
    return SpreadSummary(sample.point, float(med), (float(lo), float(hi)), direction,
                         float(halfwidth), significant, (float(gm[0]), float(gm[1])),
                         float(speeds.mean()))


def spread_field(dataset: WaitingTimeDataset, draws: PosteriorDraws,
                 points: Sequence[Location] | np.ndarray | None = None,
                 seed: int = 0, level: float = 0.95, threads: int = 1) -> list[SpreadSummary]:
    """Spread summaries at ``points`` (default: the data locations)."""
    if points is None:
        pts = dataset.coords
    elif isinstance(points, np.ndarray):
        pts = points.reshape(-1, 2)
    else:
        pts = np.array([[p.x, p.y] for p in points], dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return []
    g = _sample_points(pts, dataset, draws, seed, threads=threads)
    return [summarize_spread(GradientSample(Location(*map(float, pts[i])), g[i]), level)
            for i in range(len(pts))]


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def save_spread_csv(summaries: Sequence[SpreadSummary], path, ids: Sequence[str] | None = None) -> None:
    ids = list(ids) if ids is not None else [str(i) for i in range(len(summaries))]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SPREAD_COLUMNS)
        for i, s in zip(ids, summaries):
            lo, hi = s.speed_ci if s.speed_ci else (None, None)
            w.writerow([i, repr(s.point.x), repr(s.point.y), _fmt(s.grad_mean[0]), _fmt(s.grad_mean[1]),
                        _fmt(s.speed_median), _fmt(lo), _fmt(hi), _fmt(s.direction_deg),
                        int(s.significant)])


def load_spread_csv(path) -> tuple[list[str], list[SpreadSummary]]:
    """Read a spread CSV back into summaries (direction rebuilt from degrees)."""
    ids, out = [], []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in SPREAD_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing spread column(s) {missing}")
        for row in reader:
            def f(k):
                return float(row[k]) if row[k] != "" else None
            deg = f("direction_deg")
            direction = None if deg is None else (math.cos(math.radians(deg)), math.sin(math.radians(deg)))
            lo, hi = f("speed_lo"), f("speed_hi")
            ids.append(row["id"])
            out.append(SpreadSummary(Location(float(row["x"]), float(row["y"])), f("speed_median"),
                                     None if lo is None else (lo, hi), direction, None,
                                     row["significant"] == "1",
                                     (f("grad_x_mean") or 0.0, f("grad_y_mean") or 0.0)))
    return ids, out
