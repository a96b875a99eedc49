import numpy as np
import pytest

from spreadgrad.kernels import (CholeskyError, MaternParams, assemble_joint_cov, cholesky_jitter,
                                matern32, matern32_grad, matern32_hess)

P = MaternParams(sigma2=2.5, phi=0.03, tau2=0.1)


def K_of(delta, p=P):
    return matern32(np.hypot(*np.moveaxis(np.asarray(delta, float), -1, 0)), p)


def test_matern32_values():
    assert matern32(0.0, P) == pytest.approx(2.5)
    # phi r = 1: sigma2 * 2 / e
    assert matern32(1 / 0.03, P) == pytest.approx(2.5 * 2 * np.exp(-1.0))


def test_params_validation():
    with pytest.raises(ValueError):
        MaternParams(0.0, 1.0)
    with pytest.raises(ValueError):
        MaternParams(1.0, -1.0)
    with pytest.raises(ValueError):
        MaternParams(1.0, 1.0, -0.1)


def test_grad_matches_central_difference():
    rng = np.random.default_rng(1)
    h = 1e-4
    for _ in range(50):
        d = rng.uniform(-50, 50, 2)
        fd = [(K_of(d + h * e) - K_of(d - h * e)) / (2 * h) for e in np.eye(2)]
        np.testing.assert_allclose(matern32_grad(d, P), fd, rtol=1e-6, atol=1e-12)


def test_hessian_matches_difference_of_gradients():
    rng = np.random.default_rng(2)
    h = 1e-4
    for _ in range(50):
        d = rng.uniform(-50, 50, 2)
        fd = np.column_stack([(matern32_grad(d + h * e, P) - matern32_grad(d - h * e, P)) / (2 * h)
                              for e in np.eye(2)])
        np.testing.assert_allclose(matern32_hess(d, P), fd, rtol=1e-6, atol=1e-12)


def test_grad_and_hessian_at_origin():
    np.testing.assert_array_equal(matern32_grad(np.zeros(2), P), [0.0, 0.0])
    np.testing.assert_allclose(matern32_hess(np.zeros(2), P), -P.sigma2 * P.phi**2 * np.eye(2))
    # continuity: tiny offsets approach the limit
    np.testing.assert_allclose(matern32_hess(np.array([1e-9, 0.0]), P), matern32_hess(np.zeros(2), P),
                               rtol=1e-6)


def test_vectorised_shapes():
    d = np.random.default_rng(0).normal(size=(4, 3, 2))
    assert matern32_grad(d, P).shape == (4, 3, 2)
    assert matern32_hess(d, P).shape == (4, 3, 2, 2)


def test_cross_covariance_signs_match_difference_quotients():
    # cov(Y(s), [Y(s'+h e) - Y(s'-h e)]/2h) -> -dK/de (s - s'), built from K alone
    s, t = np.array([10.0, -4.0]), np.array([-3.0, 7.0])
    h = 1e-3
    blocks = assemble_joint_cov(np.array([s, t]), P)
    for k, e in enumerate(np.eye(2)):
        fd = (K_of(s - t - h * e) - K_of(s - t + h * e)) / (2 * h)
        # cross column for the gradient at t in direction k: index k*n + 1
        assert blocks.cross[0, 2 * k + 1] == pytest.approx(fd, rel=1e-6)


def test_gradient_covariance_matches_difference_quotients():
    s, t = np.array([10.0, -4.0]), np.array([-3.0, 7.0])
    h = 1e-3
    blocks = assemble_joint_cov(np.array([s, t]), P)
    for a, ea in enumerate(np.eye(2)):
        for b, eb in enumerate(np.eye(2)):
            # cov of central quotients at s (direction a) and t (direction b)
            fd = (K_of(s - t + h * ea - h * eb) - K_of(s - t + h * ea + h * eb)
                  - K_of(s - t - h * ea - h * eb) + K_of(s - t - h * ea + h * eb)) / (4 * h * h)
            assert blocks.grad[a * 2 + 0, b * 2 + 1] == pytest.approx(fd, rel=1e-4)


def test_joint_covariance_is_positive_semidefinite():
    xy = np.random.default_rng(3).uniform(0, 200, (15, 2))
    full = assemble_joint_cov(xy, P).full()
    assert np.allclose(full, full.T)
    assert np.linalg.eigvalsh(full).min() > -1e-10 * np.abs(full).max()


def test_joint_covariance_monte_carlo_signs():
    # simulate the field on a fine grid, difference it, and compare empirical covariances
    p = MaternParams(1.0, 1.0)
    h = 0.01
    s = np.array([0.0, 0.0])
    t = np.array([0.7, 0.2])
    pts = np.array([s, t - [h, 0], t + [h, 0]])
    d = np.hypot(*(pts[:, None] - pts[None]).transpose(2, 0, 1))
    L = np.linalg.cholesky(matern32(d, p) + 1e-12 * np.eye(3))
    z = np.random.default_rng(4).standard_normal((3, 200_000))
    Y = L @ z
    dYdx = (Y[2] - Y[1]) / (2 * h)
    emp = np.mean(Y[0] * dYdx)
    expected = -matern32_grad(s - t, p)[0]
    assert np.sign(emp) == np.sign(expected)
    assert emp == pytest.approx(expected, abs=0.02)


def test_cholesky_jitter_rescues_semidefinite():
    v = np.array([1.0, 2.0, 3.0])
    a = np.outer(v, v)  # rank one
    L = cholesky_jitter(a)
    np.testing.assert_allclose(L @ L.T, a, atol=1e-5)


def test_cholesky_jitter_gives_up_on_indefinite():
    with pytest.raises(CholeskyError):
        cholesky_jitter(np.diag([1.0, -1.0]))
