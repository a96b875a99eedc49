import csv
from dataclasses import replace

import numpy as np
import pytest
from scipy import special, stats

from conftest import linear_dataset, planted_regression
from spreadgrad.core import Location, WaitingTimeDataset
from spreadgrad.gp_fit import ChainConfig
from spreadgrad.gradient_field import SpreadSummary
from spreadgrad.spread_regression import (RegressionConfig, RegressionDesign, build_design,
                                          fit_spatial_regression, hpd_interval, matern,
                                          save_coefficients_csv)

SHORT = RegressionConfig(chain=ChainConfig(n_iter=600, burn_in=200, thin=2))


# --- HPD ----------------------------------------------------------------------

def test_hpd_standard_normal():
    x = np.random.default_rng(0).standard_normal(100_000)
    lo, hi = hpd_interval(x, 0.95)
    assert lo == pytest.approx(-1.96, abs=0.03) and hi == pytest.approx(1.96, abs=0.03)


def test_hpd_exponential():
    x = np.random.default_rng(1).exponential(size=100_000)
    lo, hi = hpd_interval(x, 0.95)
    assert lo == pytest.approx(0.0, abs=0.02)
    assert hi == pytest.approx(-np.log(0.05), abs=0.05)
    q = np.quantile(x, [0.025, 0.975])
    assert hi - lo < q[1] - q[0]


def test_hpd_symmetric_close_to_equal_tailed():
    x = np.random.default_rng(2).standard_t(5, 50_000)
    x = np.concatenate([x, -x])
    lo, hi = hpd_interval(x, 0.9)
    q = stats.t.ppf(0.95, 5)
    assert lo == pytest.approx(-q, abs=0.03) and hi == pytest.approx(q, abs=0.03)


def test_hpd_never_longer_than_equal_tailed():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.gamma(rng.uniform(0.5, 5), size=500)
        lo, hi = hpd_interval(x, 0.95)
        q = np.quantile(x, [0.025, 0.975])
        assert lo <= hi and hi - lo <= q[1] - q[0] + 1e-12
        assert np.mean((x >= lo) & (x <= hi)) >= 0.95


def test_hpd_hand_case():
    # 100 draws 0..99: every window of 95 consecutive values has width 94, the first wins
    assert hpd_interval(np.arange(100.0)[::-1], 0.95) == (0.0, 94.0)


def test_hpd_needs_100_draws():
    with pytest.raises(ValueError):
        hpd_interval(np.arange(99.0))


# --- Matérn ---------------------------------------------------------------------

def test_matern_half_integer_closed_forms():
    r = np.linspace(0, 300, 61)
    phi = 0.02
    np.testing.assert_allclose(matern(r, 2.0, phi, 0.5), 2.0 * np.exp(-phi * r), rtol=1e-12)
    np.testing.assert_allclose(matern(r, 2.0, phi, 1.5), 2.0 * (1 + phi * r) * np.exp(-phi * r),
                               rtol=1e-12)
    u = phi * r
    np.testing.assert_allclose(matern(r, 2.0, phi, 2.5), 2.0 * (1 + u + u * u / 3) * np.exp(-u),
                               rtol=1e-12)


def test_matern_far_tail_is_zero_not_nan():
    assert matern(np.array([1e6]), 1.0, 1.0, 1.2)[0] == 0.0


# --- design -----------------------------------------------------------------------

def _field_for(ds, significant=None, speed=None):
    n = ds.n
    significant = np.ones(n, bool) if significant is None else significant
    speed = np.full(n, 10.0) if speed is None else speed
    return [SpreadSummary(o.loc, float(v), (v, v), (1.0, 0.0), 0.1, bool(s), (0.1, 0.0), float(v))
            for o, s, v in zip(ds.observations, significant, speed)]


def _covariate_ds(n=30, seed=0):
    rng = np.random.default_rng(seed)
    base = linear_dataset(n, extent=300.0, seed=seed)
    return WaitingTimeDataset.from_arrays(base.coords + [1500.0, 1500.0], base.years,
                                          covariates={"zone": rng.integers(3, 7, n).astype(float),
                                                      "basal": rng.uniform(0, 40, n)})


def test_design_lon_lat_columns():
    ds = _covariate_ds()
    d = build_design(_field_for(ds), ds, ["lon", "lat"])
    assert d.names == ("intercept", "lon", "lat") and d.X.shape == (ds.n, 3)
    np.testing.assert_allclose(d.response, np.log(10.0))
    assert np.all((d.X[:, 1] > -100) & (d.X[:, 1] < -60))


def test_design_interaction_is_centred_product():
    ds = _covariate_ds()
    d = build_design(_field_for(ds), ds, ["zone", "lat"], interactions=[("zone", "lat")])
    z, lat = d.X[:, 1], d.X[:, 2]
    np.testing.assert_allclose(d.X[:, 3], (z - z.mean()) * (lat - lat.mean()))
    assert d.names[-1] == "zone:lat"


def test_design_excludes_insignificant_rows():
    ds = _covariate_ds()
    sig = np.ones(ds.n, bool)
    sig[[2, 5, 7]] = False
    d = build_design(_field_for(ds, sig), ds, ["basal"])
    assert len(d.response) == ds.n - 3 and d.n_excluded == 3
    with pytest.raises(ValueError):
        build_design(_field_for(ds, np.zeros(ds.n, bool)), ds, ["basal"])


def test_design_missing_covariate():
    ds = _covariate_ds()
    with pytest.raises(KeyError):
        build_design(_field_for(ds), ds, ["elevation"])


def test_design_validation():
    with pytest.raises(ValueError):
        RegressionDesign(np.zeros(2), np.ones((2, 2)), ("a", "a"), (Location(0, 0), Location(1, 1)))
    with pytest.raises(ValueError):
        RegressionDesign(np.array([0.0, np.nan]), np.ones((2, 1)), ("a",),
                         (Location(0, 0), Location(1, 1)))


# --- fit -----------------------------------------------------------------------------

def test_fit_needs_enough_rows():
    d = planted_regression(n=7)
    with pytest.raises(ValueError):
        fit_spatial_regression(d, SHORT)


def test_fit_recovers_planted_coefficients():
    d = planted_regression(n=80, seed=1)
    post = fit_spatial_regression(d, RegressionConfig(chain=ChainConfig(2000, 500, 3)), seed=2)
    for name, b in zip(d.names, (2.0, -1.0, 0.5)):
        lo, hi = post.hpd[name]
        assert lo <= b <= hi
    assert np.all((post.nu >= 0.5) & (post.nu <= 2.5))
    assert all(lo <= hi for lo, hi in post.hpd.values())


def test_response_shift_moves_only_intercept():
    d = planted_regression(n=40, seed=3)
    a = fit_spatial_regression(d, SHORT, seed=4)
    b = fit_spatial_regression(replace(d, response=d.response + 5.0), SHORT, seed=4)
    np.testing.assert_allclose(b.coef[:, 1:], a.coef[:, 1:], rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(b.coef[:, 0], a.coef[:, 0] + 5.0, rtol=1e-9, atol=1e-6)


def test_column_rescaling_rescales_coefficient():
    d = planted_regression(n=40, seed=5)
    a = fit_spatial_regression(d, SHORT, seed=6)
    X = d.X.copy()
    X[:, 2] *= 4.0
    b = fit_spatial_regression(replace(d, X=X), SHORT, seed=6)
    np.testing.assert_allclose(b.coef[:, 2], a.coef[:, 2] / 4.0, rtol=1e-6)
    np.testing.assert_allclose(b.coef[:, :2], a.coef[:, :2], rtol=1e-6, atol=1e-9)


def test_pure_noise_hpds_contain_zero():
    covered = []
    for rep in range(6):
        d = planted_regression(n=50, beta=(0.0, 0.0, 0.0), seed=100 + rep)
        post = fit_spatial_regression(d, SHORT, seed=rep)
        covered += [post.hpd[k][0] <= 0.0 <= post.hpd[k][1] for k in ("u", "v")]
    assert np.mean(covered) >= 0.75


def test_coefficients_csv(tmp_path):
    d = planted_regression(n=30, seed=7)
    post = fit_spatial_regression(d, SHORT, seed=8)
    save_coefficients_csv(post, tmp_path / "c.csv")
    with (tmp_path / "c.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["covariate"] for r in rows] == list(d.names)
    for r in rows:
        assert float(r["hpd_lo"]) <= float(r["posterior_mean"]) <= float(r["hpd_hi"])
