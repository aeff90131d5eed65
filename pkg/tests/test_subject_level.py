import numpy as np
import pytest

from analysis.subject_level import AlphaMethod, alpha_irls, alpha_ls


def _data(n=30, seed=3):
    rng = np.random.default_rng(seed)
    z = rng.integers(0, 2, size=(n, 1)).astype(float)
    nu = 0.4 + 0.8 * z[:, 0] + rng.normal(0, 0.5, size=n)
    return nu, z


def test_ls_recovers_exact_linear_relation():
    z = np.array([[0.0, 1.0], [1.0, 0.0], [2.0, 1.0], [3.0, 5.0], [4.0, 2.0]])
    nu = 1.5 + 0.5 * z[:, 0] - 2.0 * z[:, 1]
    fit = alpha_ls(nu, z)
    assert fit.intercept == pytest.approx(1.5)
    np.testing.assert_allclose(fit.alpha_hat, [0.5, -2.0], atol=1e-10)
    assert fit.sigma2_b_hat == pytest.approx(0.0, abs=1e-20)
    assert fit.method == AlphaMethod.LS


def test_ls_saturated_two_group_fit():
    fit = alpha_ls([0.3, 1.1], [[0.0], [1.0]])
    assert fit.alpha_hat[0] == pytest.approx(0.8)
    assert fit.sigma2_b_hat == 0.0


def test_ls_matches_classical_residual_variance():
    nu, z = _data()
    fit = alpha_ls(nu, z)
    design = np.hstack([np.ones((30, 1)), z])
    coef, rss, _, _ = np.linalg.lstsq(design, nu, rcond=None)
    assert fit.sigma2_b_hat == pytest.approx(float(rss[0]) / 28)
    np.testing.assert_allclose(fit.cov_coef, fit.sigma2_b_hat * np.linalg.inv(design.T @ design))
    assert fit.standard_errors()[0] == pytest.approx(np.sqrt(fit.cov_coef[1, 1]))


def test_design_errors():
    with pytest.raises(ValueError):
        alpha_ls([0.1, 0.2, 0.3], [[1.0], [1.0], [1.0]])
    with pytest.raises(ValueError):
        alpha_ls([0.1], [[1.0]])
    with pytest.raises(ValueError):
        alpha_ls([0.1, 0.2], [[1.0], [0.0], [1.0]])
    with pytest.raises(ValueError):
        alpha_irls([0.1, 0.2, 0.3], [[0.0], [1.0], [1.0]], np.eye(2))


def test_irls_with_isotropic_error_matches_ls():
    nu, z = _data()
    c = 0.05
    ls = alpha_ls(nu, z)
    irls = alpha_irls(nu, z, c * np.eye(30))
    np.testing.assert_allclose(irls.alpha_hat, ls.alpha_hat, atol=1e-10)
    assert irls.intercept == pytest.approx(ls.intercept)
    assert irls.converged and irls.iterations == 1
    assert irls.sigma2_b_hat == pytest.approx(irls.residual_variance - c)


def test_irls_without_estimation_error_stops_after_one_step():
    nu, z = _data()
    fit = alpha_irls(nu, z, np.zeros((30, 30)))
    assert fit.iterations == 1
    assert fit.converged
    assert fit.sigma2_b_hat == pytest.approx(fit.residual_variance)


def test_irls_downweights_noisy_subjects():
    nu, z = _data(n=40, seed=8)
    diag = np.where(np.arange(40) < 20, 0.01, 4.0)
    fit = alpha_irls(nu, z, np.diag(diag))
    assert not fit.na_flag
    assert np.all(np.isfinite(fit.cov_alpha))
    assert fit.sigma2_b_hat >= 0


def test_irls_is_shift_invariant():
    nu, z = _data()
    sigma = np.diag(np.linspace(0.01, 0.2, 30))
    base = alpha_irls(nu, z, sigma)
    shifted = alpha_irls(nu + 3.0, z, sigma)
    np.testing.assert_allclose(shifted.alpha_hat, base.alpha_hat, atol=1e-10)
    assert shifted.intercept == pytest.approx(base.intercept + 3.0)
    assert shifted.sigma2_b_hat == pytest.approx(base.sigma2_b_hat)


def test_irls_singular_weight_is_not_available():
    z = np.array([[0.0], [1.0], [0.0], [1.0]])
    nu = 0.2 + 0.5 * z[:, 0]
    fit = alpha_irls(nu, z, np.zeros((4, 4)))
    assert fit.na_flag
    assert fit.method == AlphaMethod.IRLS
    assert np.isnan(fit.alpha_hat).all()
    assert fit.to_report()["na_reason"].startswith("weight matrix is singular")


def test_irls_near_exact_fit_is_not_available():
    z = np.array([[0.0], [1.0], [2.0], [3.0], [4.0]])
    nu = 1.0 - 0.3 * z[:, 0] + 1e-9 * np.array([1.0, -1.0, 0.0, 1.0, -1.0])
    fit = alpha_irls(nu, z, np.diag(np.full(5, 1e-16)))
    assert fit.na_flag
    assert fit.na_reason.startswith("weight matrix is singular")
