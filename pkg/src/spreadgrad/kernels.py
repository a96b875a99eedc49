"""Matérn-3/2 covariance with analytic first and second spatial derivatives.

The covariance of the field is ``K(r) = sigma2 * (1 + phi*r) * exp(-phi*r)``.
For a mean-square differentiable field the gradient process satisfies

    cov(Y(s), dY/dx(s'))      = -dK/dx(s - s')
    cov(dY/dx(s), Y(s'))      = +dK/dx(s - s')
    cov(dY/da(s), dY/db(s'))  = -d2K/dadb(s - s')

which fixes the signs used throughout this package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

__all__ = [
    "CholeskyError",
    "JointCovarianceBlocks",
    "MaternParams",
    "assemble_joint_cov",
    "cholesky_jitter",
    "matern32",
    "matern32_grad",
    "matern32_hess",
]


class CholeskyError(np.linalg.LinAlgError):
    """Covariance could not be factorised even with the maximum jitter."""


@dataclass(frozen=True)
class MaternParams:
    sigma2: float
    phi: float
    tau2: float = 0.0

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be > 0, got {self.sigma2}")
        if not self.phi > 0:
            raise ValueError(f"phi must be > 0, got {self.phi}")
        if not self.tau2 >= 0:
            raise ValueError(f"tau2 must be >= 0, got {self.tau2}")


def matern32(r, params: MaternParams):
    """Smooth covariance at distance ``r`` (km). The nugget is not included."""
    pr = params.phi * np.asarray(r, dtype=float)
    return params.sigma2 * (1.0 + pr) * np.exp(-pr)


def matern32_grad(delta, params: MaternParams) -> np.ndarray:
    """Partials of ``K(|delta|)`` with respect to each component of ``delta``.

    ``delta`` has shape ``(..., 2)``; the result has the same shape.
    """
    delta = np.asarray(delta, dtype=float)
    r = np.sqrt(np.sum(delta * delta, axis=-1, keepdims=True))
    return -params.sigma2 * params.phi**2 * delta * np.exp(-params.phi * r)


def matern32_hess(delta, params: MaternParams) -> np.ndarray:
    """Hessian of ``K(|delta|)``, shape ``(..., 2, 2)``.

    ``H = -sigma2 phi^2 exp(-phi r) (I - phi delta delta^T / r)``, continuous at
    the origin where it equals ``-sigma2 phi^2 I``.
    """
    delta = np.asarray(delta, dtype=float)
    r = np.sqrt(np.sum(delta * delta, axis=-1))
    safe = np.where(r > 0, r, 1.0)
    outer = delta[..., :, None] * delta[..., None, :] * (params.phi / safe)[..., None, None]
    outer = np.where((r > 0)[..., None, None], outer, 0.0)
    scale = -params.sigma2 * params.phi**2 * np.exp(-params.phi * r)
    return scale[..., None, None] * (np.eye(2) - outer)


@dataclass(frozen=True)
class JointCovarianceBlocks:
    """Covariance of ``(Y, dY/dx, dY/dy)`` at ``n`` locations.

    Gradient components are ordered all-x then all-y. ``K`` carries the nugget
    on its diagonal; ``cross`` is ``cov(Y, grad Y)`` (``-gradK(D)``) and
    ``grad`` is ``cov(grad Y, grad Y)`` (``-H_K(D)``).
    """

    K: np.ndarray
    cross: np.ndarray
    grad: np.ndarray

    def full(self) -> np.ndarray:
        return np.block([[self.K, self.cross], [self.cross.T, self.grad]])


def assemble_joint_cov(locations, params: MaternParams) -> JointCovarianceBlocks:
    xy = np.asarray(locations, dtype=float).reshape(-1, 2)
    n = len(xy)
    delta = xy[:, None, :] - xy[None, :, :]
    r = np.sqrt(np.sum(delta**2, axis=-1))
    K = matern32(r, params) + params.tau2 * np.eye(n)
    g = matern32_grad(delta, params)
    cross = -np.concatenate([g[..., 0], g[..., 1]], axis=1)
    h = matern32_hess(delta, params)
    grad = -np.block([[h[..., 0, 0], h[..., 0, 1]], [h[..., 1, 0], h[..., 1, 1]]])
    return JointCovarianceBlocks(K, cross, grad)


def cholesky_jitter(a: np.ndarray, scale: float | None = None,
                    start: float = 1e-10, stop: float = 1e-6) -> np.ndarray:
    """Lower Cholesky factor, retrying with diagonal jitter ``start..stop`` x ``scale``.

    ``scale`` defaults to the mean diagonal of ``a``.
    """
    try:
        return linalg.cholesky(a, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    if scale is None:
        scale = float(np.mean(np.diag(a)))
    eps = start
    while eps <= stop * (1 + 1e-9):
        try:
            return linalg.cholesky(a + eps * scale * np.eye(len(a)), lower=True, check_finite=False)
        except linalg.LinAlgError:
            eps *= 10.0
    raise CholeskyError(f"covariance not positive definite with jitter up to {stop:g} x {scale:g}")
