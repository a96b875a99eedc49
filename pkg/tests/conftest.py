import numpy as np
import pytest

from spreadgrad.core import WaitingTimeDataset
from spreadgrad.gp_fit import PosteriorDraws

_ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number, title, ok, detail):
    """Store the one-line verdict for an acceptance criterion."""
    _ACCEPTANCE[number] = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}: {detail}"
    print(_ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def scattered_points(n, extent=500.0, seed=0):
    """Quasi-uniform points in a square (jittered lattice, no near-duplicates)."""
    rng = np.random.default_rng(seed)
    k = int(np.ceil(np.sqrt(n)))
    g = (np.arange(k) + 0.5) * extent / k
    xy = np.array([(x, y) for x in g for y in g])[:n]
    return xy + rng.uniform(-0.3, 0.3, xy.shape) * extent / k


def fixed_draws(m, beta=(1900.0, 0.1, 0.0), sigma2=1.0, phi=0.01, tau2=0.0):
    """``m`` identical parameter draws."""
    return PosteriorDraws(np.tile(np.asarray(beta, dtype=float), (m, 1)), np.full(m, float(sigma2)),
                          np.full(m, float(phi)), np.full(m, float(tau2)))


def linear_dataset(n=100, slope=(0.1, 0.0), beta0=1900.0, extent=500.0, seed=0):
    xy = scattered_points(n, extent, seed)
    return WaitingTimeDataset.from_arrays(xy, beta0 + xy @ np.asarray(slope))


def planted_regression(n=80, beta=(2.0, -1.0, 0.5), sigma2=0.25, phi=0.02, nu=1.5, tau2=0.01,
                       seed=0, extent=300.0):
    """Design with two standard-normal covariates and a Matérn spatial error."""
    from spreadgrad.core import Location
    from spreadgrad.spread_regression import RegressionDesign, matern

    rng = np.random.default_rng(seed)
    xy = scattered_points(n, extent, seed)
    X = np.column_stack([np.ones(n), rng.normal(size=n), rng.normal(size=n)])
    d = np.hypot(*(xy[:, None] - xy[None]).transpose(2, 0, 1))
    C = matern(d, sigma2, phi, nu) + tau2 * np.eye(n)
    y = X @ np.asarray(beta) + np.linalg.cholesky(C) @ rng.standard_normal(n)
    return RegressionDesign(y, X, ("intercept", "u", "v"), tuple(Location(*p) for p in xy))
