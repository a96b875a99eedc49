"""Bayesian fit of the waiting-time Gaussian process.

Model: ``Y(s) = b0 + b1*x + b2*y + w(s) + eps(s)`` with ``w`` Matérn-3/2 and
``eps ~ N(0, tau2)``. Priors are flat on the mean coefficients,
inverse-gamma (shape 2) on ``sigma2`` and ``tau2`` and uniform on ``phi``.

Sampling is Metropolis-within-Gibbs: the mean coefficients are drawn from
their Gaussian full conditional, each covariance parameter by an adaptive
random walk on an unconstrained scale (log for variances, logit for
bounded parameters).
"""

from __future__ import annotations

import csv
import logging
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import linalg, optimize

from .core import WaitingTimeDataset, pairwise_distances
from .kernels import CholeskyError, MaternParams, cholesky_jitter, matern32

__all__ = [
    "ChainConfig",
    "EmpiricalSemivariogram",
    "GpParams",
    "MeanParams",
    "ParamSpec",
    "PosteriorDraws",
    "PriorSpec",
    "SamplerResult",
    "default_priors",
    "empirical_semivariogram",
    "semivariogram",
    "ess",
    "fit_mcmc",
    "load_draws",
    "log_likelihood",
    "merge_draws",
    "run_spatial_mcmc",
    "save_draws",
]

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MeanParams:
    beta0: float
    beta1: float
    beta2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.beta0, self.beta1, self.beta2])


@dataclass(frozen=True)
class GpParams:
    mean: MeanParams
    cov: MaternParams

    @classmethod
    def from_values(cls, beta0, beta1, beta2, sigma2, phi, tau2):
        return cls(MeanParams(beta0, beta1, beta2), MaternParams(sigma2, phi, tau2))


# --- semivariogram ----------------------------------------------------------

@dataclass(frozen=True)
class EmpiricalSemivariogram:
    centers: np.ndarray
    gamma: np.ndarray
    counts: np.ndarray

    def nugget_and_sill(self) -> tuple[float, float]:
        """Nugget and sill from a Matérn-3/2 variogram fit with Cressie weights.

        Bins with fewer than 30 pairs are left out when at least three bins
        remain. Falls back to (first bin, upper-third mean) when the fit fails.
        """
        h, g, w = self.centers, self.gamma, self.counts
        top = float(np.max(g)) if len(g) else 0.0
        if top <= 0:
            return 0.0, 0.0
        dense = w >= 30
        if dense.sum() >= 3:
            h, g, w = h[dense], g[dense], w[dense]

        def model(hh, nug, psill, phi):
            return nug + psill * (1.0 - (1.0 + phi * hh) * np.exp(-phi * hh))

        try:
            p, _ = optimize.curve_fit(
                model, h, g, p0=[0.1 * top, 0.9 * top, 3.0 / max(h[-1], 1e-12)],
                sigma=np.maximum(g, 1e-12 * top) / np.sqrt(np.maximum(w, 1)),
                bounds=([0.0, 0.0, 1e-3 / h[-1]], [top, 10.0 * top, 100.0 / max(h[0], 1e-12)]),
                maxfev=5000,
            )
            nug, psill = float(p[0]), float(p[1])
            return nug, nug + psill
        except (RuntimeError, ValueError):
            k = max(1, len(g) // 3)
            return float(g[0]), float(np.mean(g[-k:]))


def _trend_residuals(coords: np.ndarray, y: np.ndarray) -> np.ndarray:
    X = np.column_stack([np.ones(len(y)), coords])
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    return y - X @ beta


def semivariogram(coords: np.ndarray, resid: np.ndarray, n_bins: int = 15,
                  max_dist: float | None = None) -> EmpiricalSemivariogram:
    """Matheron estimator ``sum (r_i - r_j)^2 / (2 N(h))`` over distance bins."""
    D = pairwise_distances(coords)
    iu = np.triu_indices(len(resid), k=1)
    d = D[iu]
    sq = (resid[iu[0]] - resid[iu[1]]) ** 2
    if max_dist is None:
        max_dist = 0.5 * float(d.max())
    edges = np.linspace(0.0, max_dist, n_bins + 1)
    which = np.digitize(d, edges) - 1
    ok = (which >= 0) & (which < n_bins) & (d > 0)
    counts = np.bincount(which[ok], minlength=n_bins)
    sums = np.bincount(which[ok], weights=sq[ok], minlength=n_bins)
    keep = counts > 0
    centers = 0.5 * (edges[:-1] + edges[1:])
    return EmpiricalSemivariogram(centers[keep], sums[keep] / (2.0 * counts[keep]), counts[keep])


def empirical_semivariogram(dataset: WaitingTimeDataset, n_bins: int = 15,
                            max_dist: float | None = None) -> EmpiricalSemivariogram:
    """Semivariogram of residuals from a linear trend in x and y.

    ``max_dist`` defaults to half the largest pairwise distance. Empty bins
    are dropped.
    """
    if dataset.n < 10:
        raise ValueError(f"semivariogram needs at least 10 points, got {dataset.n}")
    coords = dataset.coords
    return semivariogram(coords, _trend_residuals(coords, dataset.years), n_bins, max_dist)


# --- priors and configuration -----------------------------------------------

@dataclass(frozen=True)
class PriorSpec:
    """Hyperparameters. Inverse-gamma ``IG(shape, scale)`` has mean ``scale`` at shape 2."""

    sigma2_scale: float
    tau2_scale: float
    phi_low: float
    phi_high: float
    shape: float = 2.0

    def __post_init__(self):
        if not (self.sigma2_scale > 0 and self.tau2_scale > 0):
            raise ValueError("inverse-gamma scales must be positive")
        if not 0 < self.phi_low < self.phi_high:
            raise ValueError(f"bad phi support [{self.phi_low}, {self.phi_high}]")


def phi_support(coords: np.ndarray) -> tuple[float, float]:
    d = pairwise_distances(coords)
    d = d[d > 0]
    return 3.0 / float(d.max()), 3.0 / float(d.min())


def default_priors(dataset: WaitingTimeDataset, n_bins: int = 15,
                   phi_bounds: tuple[float, float] | None = None) -> PriorSpec:
    """Resolve prior hyperparameters from the data.

    Inverse-gamma scales equal the semivariogram nugget (for ``tau2``) and
    partial sill (for ``sigma2``). Both are floored at 1% of the residual
    variance so that neither prior degenerates.
    """
    vg = empirical_semivariogram(dataset, n_bins=n_bins)
    nug, sill = vg.nugget_and_sill()
    floor = 0.01 * max(float(np.var(_trend_residuals(dataset.coords, dataset.years))), 1e-12)
    lo, hi = phi_bounds or phi_support(dataset.coords)
    return PriorSpec(sigma2_scale=max(sill - nug, floor), tau2_scale=max(nug, floor),
                     phi_low=lo, phi_high=hi)


@dataclass(frozen=True)
class ChainConfig:
    n_iter: int = 25_000
    burn_in: int = 5_000
    thin: int = 10
    target_accept: float = 0.35
    adapt_every: int = 50
    init_step: float = 0.3
    progress_every: int = 0

    def __post_init__(self):
        if self.n_iter <= self.burn_in:
            raise ValueError("n_iter must exceed burn_in")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")


# --- generic sampler --------------------------------------------------------

def _inv_gamma_logpdf(x: float, shape: float, scale: float) -> float:
    return -(shape + 1.0) * math.log(x) - scale / x


@dataclass(frozen=True)
class ParamSpec:
    """A covariance parameter updated by random-walk Metropolis.

    ``log_prior`` is evaluated on the natural scale; bounded parameters
    (``low``/``high`` given) move on the logit scale, the rest on log scale.
    """

    name: str
    log_prior: Callable[[float], float]
    low: float | None = None
    high: float | None = None

    def to_u(self, v: float) -> float:
        if self.low is None:
            return math.log(v)
        p = (v - self.low) / (self.high - self.low)
        return math.log(p) - math.log1p(-p)

    def from_u(self, u: float) -> float:
        if self.low is None:
            return math.exp(u)
        p = 1.0 / (1.0 + math.exp(-u)) if u >= 0 else math.exp(u) / (1.0 + math.exp(u))
        return self.low + (self.high - self.low) * p

    def log_jacobian(self, v: float) -> float:
        if self.low is None:
            return math.log(v)
        return math.log(v - self.low) + math.log(self.high - v) - math.log(self.high - self.low)


@dataclass
class SamplerResult:
    beta: np.ndarray
    theta: dict[str, np.ndarray]
    accept_rate: dict[str, float]
    step: dict[str, float]
    warnings: list[str] = field(default_factory=list)


class _GaussianState:
    """Cholesky factorisation of one covariance plus cached quantities."""

    __slots__ = ("L", "logdet", "LX", "Ly")

    def __init__(self, C: np.ndarray, X: np.ndarray, y: np.ndarray, jitter_scale: float):
        self.L = cholesky_jitter(C, scale=jitter_scale)
        self.logdet = 2.0 * float(np.sum(np.log(np.diag(self.L))))
        self.LX = linalg.solve_triangular(self.L, X, lower=True, check_finite=False)
        self.Ly = linalg.solve_triangular(self.L, y, lower=True, check_finite=False)

    def loglik(self, beta: np.ndarray) -> float:
        z = self.Ly - self.LX @ beta
        return -0.5 * (len(z) * LOG_2PI + self.logdet + float(z @ z))


def run_spatial_mcmc(X: np.ndarray, y: np.ndarray,
                     cov_fn: Callable[[Mapping[str, float]], np.ndarray],
                     specs: Sequence[ParamSpec], init: Mapping[str, float],
                     config: ChainConfig, rng: np.random.Generator,
                     jitter_key: str = "sigma2", label: str = "mcmc") -> SamplerResult:
    """Metropolis-within-Gibbs for ``y ~ N(X beta, cov_fn(theta))``, flat prior on beta.

    ``init`` holds a starting value for every spec plus any fixed values
    ``cov_fn`` needs. Returns post-burn-in, thinned draws.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    theta = dict(init)
    u = {s.name: s.to_u(theta[s.name]) for s in specs}
    log_step = {s.name: math.log(config.init_step) for s in specs}

    def factor(th):
        return _GaussianState(cov_fn(th), X, y, th.get(jitter_key, 1.0))

    try:
        state = factor(theta)
    except CholeskyError as exc:
        raise CholeskyError(f"{label}: initial covariance not factorisable: {exc}") from exc
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    ll = state.loglik(beta)
    if not math.isfinite(ll):
        raise FloatingPointError(f"{label}: non-finite log-likelihood at initial values")

    keep = [(i >= config.burn_in) and ((i - config.burn_in) % config.thin == 0)
            for i in range(config.n_iter)]
    n_keep = sum(keep)
    beta_out = np.empty((n_keep, X.shape[1]))
    theta_out = {s.name: np.empty(n_keep) for s in specs}
    acc_batch = {s.name: 0 for s in specs}
    acc_post = {s.name: 0 for s in specs}
    k = 0

    for it in range(config.n_iter):
        # mean coefficients: Gaussian full conditional under a flat prior
        A = state.LX.T @ state.LX
        cA = linalg.cholesky(A, lower=True, check_finite=False)
        bhat = linalg.cho_solve((cA, True), state.LX.T @ state.Ly, check_finite=False)
        beta = bhat + linalg.solve_triangular(cA.T, rng.standard_normal(len(bhat)),
                                              lower=False, check_finite=False)
        ll = state.loglik(beta)

        for s in specs:
            cur = theta[s.name]
            u_new = u[s.name] + math.exp(log_step[s.name]) * rng.standard_normal()
            new = s.from_u(u_new)
            accepted = False
            if (s.low is None and new > 0) or (s.low is not None and s.low < new < s.high):
                prop = dict(theta)
                prop[s.name] = new
                try:
                    pstate = factor(prop)
                    ll_new = pstate.loglik(beta)
                except CholeskyError:
                    ll_new = -math.inf
                if math.isfinite(ll_new):
                    log_r = (ll_new + s.log_prior(new) + s.log_jacobian(new)
                             - ll - s.log_prior(cur) - s.log_jacobian(cur))
                    if math.log(rng.uniform()) < log_r:
                        theta, u[s.name], state, ll = prop, u_new, pstate, ll_new
                        accepted = True
            if accepted:
                acc_batch[s.name] += 1
                if it >= config.burn_in:
                    acc_post[s.name] += 1

        if it < config.burn_in and (it + 1) % config.adapt_every == 0:
            gain = min(1.0, 2.0 / math.sqrt((it + 1) / config.adapt_every))
            for s in specs:
                rate = acc_batch[s.name] / config.adapt_every
                log_step[s.name] += gain * (rate - config.target_accept)
                acc_batch[s.name] = 0

        if keep[it]:
            beta_out[k] = beta
            for s in specs:
                theta_out[s.name][k] = theta[s.name]
            k += 1

        if config.progress_every and (it + 1) % config.progress_every == 0:
            done = max(it + 1 - config.burn_in, 1)
            rates = " ".join(f"{s.name}={acc_post[s.name] / done:.2f}" if it >= config.burn_in
                             else f"{s.name}~{math.exp(log_step[s.name]):.3g}" for s in specs)
            print(f"[{label}] iter {it + 1}/{config.n_iter} {rates}", file=sys.stderr, flush=True)

    n_post = config.n_iter - config.burn_in
    rates = {s.name: acc_post[s.name] / n_post for s in specs}
    msgs = [f"{name}: acceptance rate {r:.3f} outside [0.05, 0.8]"
            for name, r in rates.items() if not 0.05 <= r <= 0.8]
    for m in msgs:
        log.warning("%s: %s", label, m)
    return SamplerResult(beta_out, theta_out, rates,
                         {k_: math.exp(v) for k_, v in log_step.items()}, msgs)


def ess(x: np.ndarray) -> float:
    """Effective sample size with Geyer's initial monotone sequence."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 4 or np.var(x) == 0:
        return float(n)
    xc = x - x.mean()
    f = np.fft.rfft(xc, n=2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (np.arange(n, 0, -1))
    acf /= acf[0]
    pairs = acf[: n - n % 2].reshape(-1, 2).sum(axis=1)
    tau = -1.0
    prev = math.inf
    for p in pairs:
        if p <= 0:
            break
        p = min(p, prev)
        tau += 2.0 * p
        prev = p
    return float(n / max(tau, 1e-12))


# --- the waiting-time model --------------------------------------------------

def _design(coords: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(len(coords)), coords])


def log_likelihood(dataset: WaitingTimeDataset, params: GpParams) -> float:
    """Gaussian log density of the observed years under ``params``."""
    coords = dataset.coords
    D = pairwise_distances(coords)
    C = matern32(D, params.cov) + params.cov.tau2 * np.eye(len(D))
    L = cholesky_jitter(C, scale=params.cov.sigma2)
    r = dataset.years - _design(coords) @ params.mean.as_array()
    z = linalg.solve_triangular(L, r, lower=True, check_finite=False)
    return -0.5 * (len(r) * LOG_2PI + 2.0 * float(np.sum(np.log(np.diag(L)))) + float(z @ z))


@dataclass(frozen=True)
class PosteriorDraws:
    """Retained parameter draws stored column-wise."""

    beta: np.ndarray
    sigma2: np.ndarray
    phi: np.ndarray
    tau2: np.ndarray
    diagnostics: Mapping[str, object] = field(default_factory=dict)

    COLUMNS = ("beta0", "beta1", "beta2", "sigma2", "phi", "tau2")

    def __post_init__(self):
        m = len(self.sigma2)
        if self.beta.shape != (m, 3) or len(self.phi) != m or len(self.tau2) != m:
            raise ValueError("inconsistent draw array shapes")
        if np.any(self.sigma2 <= 0) or np.any(self.phi <= 0) or np.any(self.tau2 < 0):
            raise ValueError("draw violates covariance positivity")

    def __len__(self):
        return len(self.sigma2)

    def __getitem__(self, i) -> GpParams:
        return GpParams(MeanParams(*map(float, self.beta[i])),
                        MaternParams(float(self.sigma2[i]), float(self.phi[i]), float(self.tau2[i])))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def as_matrix(self) -> np.ndarray:
        return np.column_stack([self.beta, self.sigma2, self.phi, self.tau2])

    def column(self, name: str) -> np.ndarray:
        return self.as_matrix()[:, self.COLUMNS.index(name)]

    def subsample(self, max_draws: int) -> "PosteriorDraws":
        if len(self) <= max_draws:
            return self
        idx = np.linspace(0, len(self) - 1, max_draws).round().astype(int)
        return replace(self, beta=self.beta[idx], sigma2=self.sigma2[idx],
                       phi=self.phi[idx], tau2=self.tau2[idx])


def merge_draws(chains: Sequence[PosteriorDraws]) -> PosteriorDraws:
    return PosteriorDraws(np.concatenate([c.beta for c in chains]),
                          np.concatenate([c.sigma2 for c in chains]),
                          np.concatenate([c.phi for c in chains]),
                          np.concatenate([c.tau2 for c in chains]),
                          {"chains": [dict(c.diagnostics) for c in chains]})


def fit_mcmc(dataset: WaitingTimeDataset, config: ChainConfig | None = None,
             priors: PriorSpec | None = None, seed: int = 0,
             fixed: Mapping[str, float] | None = None) -> PosteriorDraws:
    """Sample the posterior of ``(beta0, beta1, beta2, sigma2, phi, tau2)``.

    ``fixed`` pins any of ``sigma2``, ``phi``, ``tau2`` at a value; they are
    then excluded from the Metropolis updates.
    """
    if dataset.n < 3:
        raise ValueError(f"need at least 3 observations, got {dataset.n}")
    config = config or ChainConfig()
    priors = priors or default_priors(dataset)
    fixed = dict(fixed or {})
    coords = dataset.coords
    D = pairwise_distances(coords)
    eye = np.eye(len(D))

    def cov_fn(th):
        pr = th["phi"] * D
        return th["sigma2"] * (1.0 + pr) * np.exp(-pr) + th["tau2"] * eye

    a = priors.shape
    all_specs = {
        "sigma2": ParamSpec("sigma2", lambda v: _inv_gamma_logpdf(v, a, priors.sigma2_scale)),
        "phi": ParamSpec("phi", lambda v: 0.0, priors.phi_low, priors.phi_high),
        "tau2": ParamSpec("tau2", lambda v: _inv_gamma_logpdf(v, a, priors.tau2_scale)),
    }
    init = {"sigma2": priors.sigma2_scale, "tau2": priors.tau2_scale,
            "phi": 0.5 * (priors.phi_low + priors.phi_high)}
    init.update(fixed)
    specs = [s for name, s in all_specs.items() if name not in fixed]
    rng = np.random.default_rng(seed)
    res = run_spatial_mcmc(_design(coords), dataset.years, cov_fn, specs, init, config, rng,
                           label="fit")
    m = len(res.beta)
    cols = {name: res.theta[name] if name in res.theta else np.full(m, float(init[name]))
            for name in ("sigma2", "phi", "tau2")}
    diag = {
        "n_iter": config.n_iter, "burn_in": config.burn_in, "thin": config.thin, "seed": seed,
        "acceptance": res.accept_rate, "step": res.step, "warnings": res.warnings,
        "ess": {name: ess(v) for name, v in zip(PosteriorDraws.COLUMNS,
                                                np.column_stack([res.beta, cols["sigma2"],
                                                                 cols["phi"], cols["tau2"]]).T)},
        "priors": {"sigma2_scale": priors.sigma2_scale, "tau2_scale": priors.tau2_scale,
                   "phi_low": priors.phi_low, "phi_high": priors.phi_high, "shape": priors.shape},
    }
    return PosteriorDraws(res.beta, cols["sigma2"], cols["phi"], cols["tau2"], diag)


# --- persistence ----------------------------------------------------------------

def save_draws(draws: PosteriorDraws, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PosteriorDraws.COLUMNS)
        for row in draws.as_matrix():
            w.writerow([repr(float(v)) for v in row])


def load_draws(path) -> PosteriorDraws:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != PosteriorDraws.COLUMNS:
            raise ValueError(f"{path}: unexpected draws header {header}")
        rows = [[float(v) for v in r] for r in reader if r]
    M = np.asarray(rows, dtype=float).reshape(-1, 6)
    return PosteriorDraws(M[:, :3].copy(), M[:, 3].copy(), M[:, 4].copy(), M[:, 5].copy())
