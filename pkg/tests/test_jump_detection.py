import csv
import math

import numpy as np
import pytest

from conftest import fixed_draws, linear_dataset, scattered_points
from spreadgrad.core import Location, WaitingTimeDataset
from spreadgrad.gradient_field import SpreadSummary
from spreadgrad.jump_detection import (IN, JUMP_COLUMNS, NONE, OUT, CurveSegment, avg_normal_gradient,
                                       box_jump_scan, box_segments, flag_rule, grid_centers,
                                       rayleigh_scan, rayleigh_test, save_jumps_csv,
                                       segment_gradient_draws)
from spreadgrad.kernels import assemble_joint_cov


# --- Rayleigh ---------------------------------------------------------------

def test_rayleigh_identical_directions():
    R, p = rayleigh_test(np.zeros(10))
    assert R == pytest.approx(20.0)
    assert p == pytest.approx(math.exp(-10.0), rel=1e-12)


def test_rayleigh_hand_values():
    # two orthogonal unit vectors: rbar^2 = 1/2, R = 2
    R, p = rayleigh_test(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert R == pytest.approx(2.0) and p == pytest.approx(math.exp(-1.0))
    R, p = rayleigh_test(np.array([0.0, math.pi]))
    assert R == pytest.approx(0.0, abs=1e-12) and p == pytest.approx(1.0)


def test_rayleigh_angles_and_vectors_agree():
    a = np.random.default_rng(0).uniform(0, 2 * np.pi, 15)
    assert rayleigh_test(a) == pytest.approx(rayleigh_test(np.column_stack([np.cos(a), np.sin(a)])))


def test_rayleigh_needs_two():
    with pytest.raises(ValueError):
        rayleigh_test([0.3])


def _field(points, angles, speed=10.0, significant=True):
    return [SpreadSummary(Location(*p), speed, (speed, speed), (math.cos(a), math.sin(a)), 0.1,
                          significant) for p, a in zip(points, angles)]


def test_rayleigh_scan_radial_versus_parallel():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-50, 50, (40, 2))
    radial = _field(pts, np.arctan2(pts[:, 1], pts[:, 0]))
    parallel = _field(pts, np.zeros(40))
    c = np.array([[0.0, 0.0]])
    r_rad = rayleigh_scan(radial, radius=100.0, centers=c, speed_floor=None)[0]
    r_par = rayleigh_scan(parallel, radius=100.0, centers=c, speed_floor=None)[0]
    assert r_rad.tested and r_rad.flagged and not r_rad.rejects
    assert r_par.rejects and not r_par.flagged and r_par.p_value < 1e-10


def test_rayleigh_scan_too_few_neighbours():
    f = _field([(0.0, 0.0), (500.0, 0.0)], [0.0, 1.0])
    res = rayleigh_scan(f, radius=10.0)
    assert all(not r.tested and not r.flagged and r.p_value == 1.0 for r in res)


def test_rayleigh_scan_ignores_insignificant():
    pts = np.random.default_rng(2).uniform(-10, 10, (10, 2))
    f = _field(pts, np.zeros(10), significant=False)
    assert rayleigh_scan(f, radius=50.0, centers=np.zeros((1, 2)))[0].n_neighbors == 0


def test_rayleigh_scan_speed_floor():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-50, 50, (30, 2))
    f = _field(pts, rng.uniform(0, 2 * np.pi, 30), speed=5.0)
    r = rayleigh_scan(f, radius=200.0, centers=np.zeros((1, 2)), speed_floor=6.0)[0]
    assert r.tested and not r.flagged


# --- segments -------------------------------------------------------------------

def test_segment_validation():
    with pytest.raises(ValueError):
        CurveSegment(Location(0, 0), Location(0, 0), (1.0, 0.0))
    with pytest.raises(ValueError):
        CurveSegment(Location(0, 0), Location(0, 1), (0.0, 1.0))
    with pytest.raises(ValueError):
        CurveSegment(Location(0, 0), Location(0, 1), (2.0, 0.0))


def test_box_segments_have_outward_normals():
    c = Location(10.0, -5.0)
    for seg in box_segments(c, 4.0):
        mid = np.array([(seg.start.x + seg.end.x) / 2, (seg.start.y + seg.end.y) / 2])
        assert seg.length == pytest.approx(4.0)
        assert np.dot(mid - c.as_array(), seg.outward_normal) == pytest.approx(2.0)


def _dense_linear(slope=(0.1, 0.0)):
    return linear_dataset(144, slope=slope, extent=300.0, seed=4)


def test_linear_field_average_normal_gradient():
    ds = _dense_linear()
    draws = fixed_draws(100, beta=(1900.0, 0.1, 0.0), sigma2=25.0, phi=0.001)
    east = CurveSegment(Location(150.0, 100.0), Location(150.0, 200.0), (1.0, 0.0))
    res = avg_normal_gradient(east, ds, draws, seed=1)
    assert np.max(np.abs(res.avg_normal_gradient_draws - 0.1)) < 1e-3
    assert res.classification == OUT
    north = CurveSegment(Location(100.0, 150.0), Location(200.0, 150.0), (0.0, 1.0))
    res = avg_normal_gradient(north, ds, draws, seed=1)
    assert np.max(np.abs(res.avg_normal_gradient_draws)) < 1e-3
    assert res.classification == NONE
    west = CurveSegment(Location(150.0, 200.0), Location(150.0, 100.0), (-1.0, 0.0))
    assert avg_normal_gradient(west, ds, draws, seed=1).classification == IN


def _oracle_moments(seg, ds, theta, n=400):
    """Midpoint-rule mean and variance from the full joint Gaussian at ``n`` nodes."""
    t = (np.arange(n) + 0.5) / n
    a, b = seg.start.as_array(), seg.end.as_array()
    nodes = a + t[:, None] * (b - a)
    xy = np.vstack([ds.coords, nodes])
    m = ds.n
    N = len(xy)
    full = assemble_joint_cov(xy, theta.cov).full()
    iy = np.arange(m)
    ig = np.concatenate([N + m + np.arange(n), 2 * N + m + np.arange(n)])
    w = np.concatenate([np.full(n, seg.outward_normal[0] / n), np.full(n, seg.outward_normal[1] / n)])
    mu = theta.mean.beta0 + ds.coords @ np.array([theta.mean.beta1, theta.mean.beta2])
    Syy = full[np.ix_(iy, iy)]
    cross = w @ full[np.ix_(ig, iy)]
    mean = np.dot(seg.outward_normal, [theta.mean.beta1, theta.mean.beta2]) + cross @ np.linalg.solve(
        Syy, ds.years - mu)
    var = w @ full[np.ix_(ig, ig)] @ w - cross @ np.linalg.solve(Syy, cross)
    return mean, var


def test_segment_moments_match_joint_oracle():
    xy = scattered_points(30, 200.0, seed=5)
    ds = WaitingTimeDataset.from_arrays(xy, 1900 + 0.05 * xy[:, 0] + 0.02 * xy[:, 1]
                                        + np.random.default_rng(5).normal(0, 1, 30))
    draws = fixed_draws(1, beta=(1899.0, 0.04, 0.0), sigma2=4.0, phi=0.02, tau2=0.5)
    segs = [CurveSegment(Location(40.0, 60.0), Location(40.0, 140.0), (1.0, 0.0)),
            CurveSegment(Location(30.0, 30.0), Location(150.0, 90.0),
                         (-60 / math.hypot(120, 60), 120 / math.hypot(120, 60)))]
    _, mu, sd = segment_gradient_draws(segs, ds, draws, n_nodes=24)
    for k, seg in enumerate(segs):
        m_ref, v_ref = _oracle_moments(seg, ds, draws[0])
        # errors measured against the prior gradient scale sigma * phi
        assert mu[k, 0] == pytest.approx(m_ref, abs=1e-3 * 2.0 * 0.02)
        assert sd[k, 0] ** 2 == pytest.approx(v_ref, rel=1e-3)


def test_quadrature_self_convergence():
    ds = linear_dataset(80, extent=300.0, seed=6)
    ds = WaitingTimeDataset.from_arrays(ds.coords, ds.years + 3 * np.sin(ds.coords[:, 1] / 40))
    draws = fixed_draws(3, sigma2=9.0, phi=0.01, tau2=0.2)
    seg = [CurveSegment(Location(100.0, 50.0), Location(100.0, 250.0), (1.0, 0.0))]
    _, m16, s16 = segment_gradient_draws(seg, ds, draws, n_nodes=16)
    _, m32, s32 = segment_gradient_draws(seg, ds, draws, n_nodes=32)
    np.testing.assert_allclose(m16, m32, rtol=1e-3)
    np.testing.assert_allclose(s16, s32, rtol=1e-3)


def test_reversed_segment_negates_mean():
    ds = linear_dataset(50, extent=200.0, seed=7)
    draws = fixed_draws(4, beta=(1900.0, 0.05, 0.0), sigma2=9.0, phi=0.01, tau2=0.2)
    seg = CurveSegment(Location(50.0, 40.0), Location(120.0, 160.0),
                       (120 / math.hypot(70, 120), -70 / math.hypot(70, 120)))
    _, m1, s1 = segment_gradient_draws([seg], ds, draws)
    _, m2, s2 = segment_gradient_draws([seg.reversed()], ds, draws)
    np.testing.assert_allclose(m2, -m1, rtol=1e-10)
    np.testing.assert_allclose(s2, s1, rtol=1e-10)


def test_segment_draws_independent_of_threads_and_chunks():
    ds = linear_dataset(60, extent=300.0, seed=8)
    draws = fixed_draws(20, sigma2=9.0, phi=0.01, tau2=0.2)
    segs = [s for c in grid_centers(ds, 60.0) for s in box_segments(Location(*c), 50.0)]
    a = segment_gradient_draws(segs, ds, draws, seed=3, threads=1)[0]
    b = segment_gradient_draws(segs, ds, draws, seed=3, threads=3)[0]
    np.testing.assert_array_equal(a, b)


def test_too_few_nodes():
    ds = linear_dataset(20)
    seg = CurveSegment(Location(0, 0), Location(0, 1), (1.0, 0.0))
    with pytest.raises(ValueError):
        segment_gradient_draws([seg], ds, fixed_draws(2), n_nodes=3)


# --- boxes -----------------------------------------------------------------------

def test_flag_rule_truth_table():
    assert flag_rule([OUT, OUT, NONE, NONE])
    assert flag_rule([OUT, OUT, OUT, OUT])
    assert not flag_rule([OUT, NONE, NONE, NONE])
    assert not flag_rule([OUT, OUT, OUT, IN])
    assert not flag_rule([NONE] * 4)


def test_grid_centers_inside_hull():
    tri = WaitingTimeDataset.from_arrays([[0, 0], [100, 0], [0, 100]], [1, 2, 3])
    g = grid_centers(tri, 10.0)
    assert len(g) > 0 and np.all(g.sum(axis=1) <= 100 + 1e-9)
    assert np.all(g >= 0)


def test_box_scan_flags_cone_centre_not_planar_wave():
    xy = scattered_points(196, 400.0, seed=9) - 200.0
    cone = WaitingTimeDataset.from_arrays(xy, 1900 + np.hypot(*xy.T) / 20.0)
    draws = fixed_draws(100, beta=(1900.0, 0.0, 0.0), sigma2=100.0, phi=0.005, tau2=0.01)
    centres = np.array([[0.0, 0.0], [120.0, 0.0]])
    boxes = box_jump_scan(cone, draws, box_side=100.0, centers=centres, seed=1)
    assert boxes[0].flagged
    assert all(v == OUT for v in boxes[0].classifications.values())
    assert not boxes[1].flagged and boxes[1].classifications["W"] == IN
    plane = WaitingTimeDataset.from_arrays(xy, 1900 + xy[:, 0] / 20.0)
    draws = fixed_draws(100, beta=(1900.0, 0.05, 0.0), sigma2=100.0, phi=0.005, tau2=0.01)
    boxes = box_jump_scan(plane, draws, grid=50.0, box_side=100.0, seed=2)
    assert len(boxes) > 20 and not any(b.flagged for b in boxes)


def test_save_jumps_csv_schema(tmp_path):
    ds = linear_dataset(40, extent=200.0)
    draws = fixed_draws(100, beta=(1900.0, 0.1, 0.0), sigma2=9.0, phi=0.01, tau2=0.1)
    centres = grid_centers(ds, 80.0)
    boxes = box_jump_scan(ds, draws, centers=centres)
    field = _field(ds.coords, np.zeros(ds.n))
    ray = rayleigh_scan(field, centers=centres)
    save_jumps_csv(boxes, ray, tmp_path / "j.csv")
    with (tmp_path / "j.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == JUMP_COLUMNS and len(rows) == len(centres)
    assert {r["E"] for r in rows} == {"out"} and {r["W"] for r in rows} == {"in"}
