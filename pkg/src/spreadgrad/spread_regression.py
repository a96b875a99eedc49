"""Bayesian spatial regression of log spread speed on covariates.

``log V(s) = X(s) beta + w(s) + eps(s)`` with ``w`` a Matérn process of
unknown smoothness ``nu``. Covariates are standardised for sampling and the
coefficient draws are mapped back to the original column scales.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special
from scipy.spatial import distance

from .core import DEFAULT_ALBERS, Location, WaitingTimeDataset, unproject_albers
from .gp_fit import (ChainConfig, ParamSpec, _inv_gamma_logpdf, ess, phi_support,
                     run_spatial_mcmc, semivariogram)
from .gradient_field import SpreadSummary

__all__ = [
    "RegressionConfig",
    "RegressionDesign",
    "RegressionPosterior",
    "build_design",
    "fit_spatial_regression",
    "hpd_interval",
    "matern",
    "save_coefficients_csv",
]


def hpd_interval(draws, level: float = 0.95) -> tuple[float, float]:
    """Shortest interval holding ``ceil(level * m)`` of the sorted draws."""
    x = np.sort(np.asarray(draws, dtype=float).ravel())
    m = len(x)
    if m < 100:
        raise ValueError(f"HPD interval needs at least 100 draws, got {m}")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    k = int(math.ceil(level * m))
    widths = x[k - 1:] - x[: m - k + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + k - 1])


def matern(r, sigma2: float, phi: float, nu: float) -> np.ndarray:
    """Matérn covariance ``sigma2 2^(1-nu)/Gamma(nu) (phi r)^nu K_nu(phi r)``.

    At ``nu = 3/2`` this is ``sigma2 (1 + phi r) exp(-phi r)``.
    """
    r = np.asarray(r, dtype=float)
    u = phi * r
    out = np.full(u.shape, float(sigma2))
    pos = u > 0
    up = u[pos]
    log_c = (1.0 - nu) * math.log(2.0) - special.gammaln(nu)
    out[pos] = sigma2 * np.exp(log_c + nu * np.log(up)) * special.kv(nu, up)
    # kv underflows to 0 for large arguments; that is the right limit
    return np.nan_to_num(out, nan=0.0)


@dataclass(frozen=True)
class RegressionDesign:
    response: np.ndarray
    X: np.ndarray
    names: tuple[str, ...]
    locations: tuple[Location, ...]
    n_excluded: int = 0

    def __post_init__(self):
        n = len(self.response)
        if self.X.shape[0] != n or len(self.locations) != n:
            raise ValueError("response, design rows and locations differ in length")
        if self.X.shape[1] != len(self.names) or len(set(self.names)) != len(self.names):
            raise ValueError("column names must be unique and match the design")
        if not np.all(np.isfinite(self.X)) or not np.all(np.isfinite(self.response)):
            raise ValueError("design has missing or non-finite cells")

    @property
    def coords(self) -> np.ndarray:
        return np.array([[p.x, p.y] for p in self.locations], dtype=float).reshape(-1, 2)


def _covariate_column(name: str, dataset: WaitingTimeDataset, coords: np.ndarray) -> np.ndarray:
    if name in dataset.covariate_names:
        return dataset.covariate(name)
    if name == "x":
        return coords[:, 0]
    if name == "y":
        return coords[:, 1]
    if name in ("lon", "lat"):
        lon, lat = unproject_albers(coords[:, 0], coords[:, 1], DEFAULT_ALBERS)
        return lon if name == "lon" else lat
    if name == "year":
        return dataset.years
    raise KeyError(f"covariate {name!r} not found; dataset has {dataset.covariate_names}")


def build_design(field: Sequence[SpreadSummary], dataset: WaitingTimeDataset,
                 covariate_names: Sequence[str],
                 interactions: Sequence[tuple[str, str]] = (),
                 response: str = "median") -> RegressionDesign:
    """Regression design from a spread field evaluated at the data locations.

    Rows with insignificant spread are dropped (count in ``n_excluded``).
    Besides dataset columns, ``x``/``y`` (km), ``lon``/``lat`` (degrees, from
    the Albers inverse) and ``year`` are accepted as covariates. An
    interaction ``(a, b)`` adds the product of the centred columns as ``a:b``.
    """
    if len(field) != dataset.n:
        raise ValueError("spread field must be evaluated at the dataset locations, in order")
    coords = dataset.coords
    cols = {name: _covariate_column(name, dataset, coords) for name in covariate_names}
    names = ["intercept", *covariate_names]
    data = [np.ones(dataset.n), *(cols[n] for n in covariate_names)]
    for a, b in interactions:
        ca = cols[a] if a in cols else _covariate_column(a, dataset, coords)
        cb = cols[b] if b in cols else _covariate_column(b, dataset, coords)
        names.append(f"{a}:{b}")
        data.append((ca - ca.mean()) * (cb - cb.mean()))
    X = np.column_stack(data)

    if response == "median":
        speed = np.array([s.speed_median if s.speed_median is not None else np.nan for s in field])
    elif response == "mean":
        speed = np.array([s.speed_mean if s.speed_mean is not None else np.nan for s in field])
    else:
        raise ValueError(f"response must be 'median' or 'mean', got {response!r}")
    keep = np.array([s.significant for s in field]) & np.isfinite(speed) & (speed > 0)
    if not keep.any():
        raise ValueError("no location has significant spread")
    idx = np.flatnonzero(keep)
    return RegressionDesign(np.log(speed[idx]), X[idx], tuple(names),
                            tuple(Location(*map(float, coords[i])) for i in idx),
                            n_excluded=int(dataset.n - len(idx)))


@dataclass(frozen=True)
class RegressionConfig:
    chain: ChainConfig = ChainConfig(n_iter=10_000, burn_in=2_000, thin=5)
    nu_bounds: tuple[float, float] = (0.5, 2.5)
    phi_bounds: tuple[float, float] | None = None
    level: float = 0.95


@dataclass(frozen=True)
class RegressionPosterior:
    names: tuple[str, ...]
    coef: np.ndarray              # (m, p) on the original covariate scales
    sigma2: np.ndarray
    phi: np.ndarray
    tau2: np.ndarray
    nu: np.ndarray
    hpd: dict[str, tuple[float, float]]
    diagnostics: dict = field(default_factory=dict)

    @property
    def means(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.coef.mean(axis=0))}


def fit_spatial_regression(design: RegressionDesign, config: RegressionConfig | None = None,
                           seed: int = 0) -> RegressionPosterior:
    config = config or RegressionConfig()
    n, p = design.X.shape
    if n < p + 5:
        raise ValueError(f"need at least {p + 5} rows for {p} columns, got {n}")
    X = design.X
    is_const = np.all(X == X[0], axis=0)
    center = np.where(is_const, 0.0, X.mean(axis=0))
    scale = np.where(is_const, 1.0, X.std(axis=0))
    Z = (X - center) / scale
    Z[:, is_const] = X[:, is_const]
    y = design.response

    coords = design.coords
    d_condensed = distance.pdist(coords)
    beta_ols, *_ = np.linalg.lstsq(Z, y, rcond=None)
    vg = semivariogram(coords, y - Z @ beta_ols)
    nug, sill = vg.nugget_and_sill()
    floor = 0.01 * max(float(np.var(y - Z @ beta_ols)), 1e-12)
    s_scale, t_scale = max(sill - nug, floor), max(nug, floor)
    lo, hi = config.phi_bounds or phi_support(coords)
    nu_lo, nu_hi = config.nu_bounds

    eye = np.eye(n)
    cache: dict[tuple[float, float], np.ndarray] = {}

    def cov_fn(th):
        key = (th["phi"], th["nu"])
        R = cache.get(key)
        if R is None:
            R = distance.squareform(matern(d_condensed, 1.0, th["phi"], th["nu"]))
            np.fill_diagonal(R, 1.0)
            if len(cache) >= 2:
                cache.pop(next(iter(cache)))
            cache[key] = R
        return th["sigma2"] * R + th["tau2"] * eye

    specs = [
        ParamSpec("sigma2", lambda v: _inv_gamma_logpdf(v, 2.0, s_scale)),
        ParamSpec("phi", lambda v: 0.0, lo, hi),
        ParamSpec("tau2", lambda v: _inv_gamma_logpdf(v, 2.0, t_scale)),
        ParamSpec("nu", lambda v: 0.0, nu_lo, nu_hi),
    ]
    init = {"sigma2": s_scale, "tau2": t_scale, "phi": 0.5 * (lo + hi), "nu": 0.5 * (nu_lo + nu_hi)}
    rng = np.random.default_rng(seed)
    res = run_spatial_mcmc(Z, y, cov_fn, specs, init, config.chain, rng, label="regress")

    # back to original scales: beta_j = b_j / s_j, intercept absorbs the centring
    coef = res.beta / scale
    icpt = [i for i, nm in enumerate(design.names) if nm == "intercept"]
    if icpt:
        coef[:, icpt[0]] = res.beta[:, icpt[0]] - (res.beta * (center / scale)).sum(axis=1)
    hpd = {nm: hpd_interval(coef[:, j], config.level) for j, nm in enumerate(design.names)}
    diag = {"acceptance": res.accept_rate, "warnings": res.warnings,
            "ess": {nm: ess(coef[:, j]) for j, nm in enumerate(design.names)},
            "priors": {"sigma2_scale": s_scale, "tau2_scale": t_scale, "phi_low": lo, "phi_high": hi,
                       "nu_low": nu_lo, "nu_high": nu_hi}}
    return RegressionPosterior(design.names, coef, res.theta["sigma2"], res.theta["phi"],
                               res.theta["tau2"], res.theta["nu"], hpd, diag)


def save_coefficients_csv(post: RegressionPosterior, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["covariate", "posterior_mean", "hpd_lo", "hpd_hi"])
        for j, nm in enumerate(post.names):
            lo, hi = post.hpd[nm]
            w.writerow([nm, repr(float(post.coef[:, j].mean())), repr(lo), repr(hi)])
