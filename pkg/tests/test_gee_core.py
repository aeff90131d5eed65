import math

import numpy as np
import pytest

from analysis.gee_core import (FitConfig, assemble_working_covariance, fit_gee, sandwich_variance,
                               working_variances)
from analysis.models import CovMethod, CovParamEstimate, VarianceKind, WorkingCovariance
from data.data_models import Panel


def _random_panel(rng, subject_factory, n, k_max):
    subjects = []
    for i in range(n):
        k = int(rng.integers(3, k_max + 1))
        times = np.sort(rng.uniform(0, 1, size=k))
        offsets = rng.uniform(0.5, 2.0, size=k)
        x = rng.normal(size=(k, 2))
        mu = offsets * np.exp(0.8 + 0.3 * x[:, 0] - 0.2 * x[:, 1])
        counts = rng.poisson(mu)
        if counts.sum() == 0:
            counts[0] = 1
        subjects.append(subject_factory(str(i), times, counts, offsets=offsets, z=rng.normal(size=1), x=x))
    return Panel(subjects=subjects, z_names=("z1",), x_names=("x1", "x2"))


def _dense(panel, use_fse):
    """Stacked design, counts and log offsets, with subject dummies under FSE."""
    rows, y, log_m = [], [], []
    for i, s in enumerate(panel.subjects):
        if use_fse:
            lead = np.zeros((s.k, panel.n))
            lead[:, i] = 1.0
        else:
            lead = np.column_stack([np.ones(s.k), np.tile(s.subject_covariates, (s.k, 1))])
        rows.append(np.hstack([lead, s.trip_covariates]))
        y.append(s.counts)
        log_m.append(np.log(s.offsets))
    return np.vstack(rows), np.concatenate(y).astype(float), np.concatenate(log_m)


def _newton(design, y, log_m):
    coef = np.zeros(design.shape[1])
    coef[0] = math.log(y.sum() / np.exp(log_m).sum())
    for _ in range(200):
        mu = np.exp(log_m + design @ coef)
        step = np.linalg.solve(design.T @ (mu[:, None] * design), design.T @ (y - mu))
        coef = coef + step
        if np.max(np.abs(step)) < 1e-13:
            break
    return coef


@pytest.mark.parametrize("use_fse", [False, True])
def test_independence_fit_matches_dense_newton(subject_factory, use_fse):
    rng = np.random.default_rng(31 + use_fse)
    for _ in range(20):
        panel = _random_panel(rng, subject_factory, n=int(rng.integers(3, 6)), k_max=20)
        fit = fit_gee(panel, FitConfig(use_fse=use_fse))
        assert fit.converged and not fit.na_flag
        design, y, log_m = _dense(panel, use_fse)
        if use_fse:
            # the oracle has no common intercept, so seed each dummy in turn
            coef = np.zeros(design.shape[1])
            for i, s in enumerate(panel.subjects):
                coef[i] = math.log(s.counts.sum() / s.offsets.sum())
            for _ in range(200):
                mu = np.exp(log_m + design @ coef)
                step = np.linalg.solve(design.T @ (mu[:, None] * design), design.T @ (y - mu))
                coef += step
                if np.max(np.abs(step)) < 1e-13:
                    break
        else:
            coef = _newton(design, y, log_m)
        assert np.max(np.abs(np.asarray(fit.coef) - coef)) < 1e-8


def test_model_based_variance_is_inverse_information(subject_factory):
    panel = _random_panel(np.random.default_rng(3), subject_factory, n=5, k_max=15)
    fit = fit_gee(panel, FitConfig())
    design, y, log_m = _dense(panel, False)
    mu = np.exp(log_m + design @ np.asarray(fit.coef))
    np.testing.assert_allclose(fit.cov_model, np.linalg.inv(design.T @ (mu[:, None] * design)), rtol=1e-7, atol=1e-12)


def test_robust_variance_clusters_by_block(subject_factory):
    rng = np.random.default_rng(8)
    subjects = []
    for i in range(4):
        times = np.sort(rng.uniform(0, 1, size=12))
        counts = rng.poisson(3.0, size=12)
        subjects.append(subject_factory(str(i), times, counts, z=[float(i % 2)],
                                        block_ids=np.repeat([0, 1, 2], 4)))
    panel = Panel(subjects=subjects, z_names=("z1",), x_names=("x1",))
    fit = fit_gee(panel, FitConfig())

    design, y, log_m = _dense(panel, False)
    mu = np.exp(log_m + design @ np.asarray(fit.coef))
    bread = np.linalg.inv(design.T @ (mu[:, None] * design))
    meat = np.zeros_like(bread)
    for c in range(12):
        rows = slice(4 * c, 4 * c + 4)
        g = design[rows].T @ (y[rows] - mu[rows])
        meat += np.outer(g, g)
    np.testing.assert_allclose(fit.cov_robust, bread @ meat @ bread, rtol=1e-7, atol=1e-12)


def test_fse_score_identity(goup_panel):
    fit = fit_gee(goup_panel, FitConfig(use_fse=True))
    for s, mu in zip(goup_panel.select(fit.subject_ids).subjects, fit.fitted):
        assert mu.sum() == pytest.approx(s.counts.sum(), rel=1e-6)


def test_offset_rescaling_leaves_beta_unchanged(goup_panel):
    for use_fse in (False, True):
        base = fit_gee(goup_panel, FitConfig(use_fse=use_fse))
        scaled = fit_gee(goup_panel.with_offsets_scaled(3.0), FitConfig(use_fse=use_fse))
        np.testing.assert_allclose(scaled.beta_hat, base.beta_hat, atol=1e-8)
        np.testing.assert_allclose(scaled.cov_robust, base.cov_robust, rtol=1e-6, atol=1e-12)
        if use_fse:
            np.testing.assert_allclose(scaled.nu_hat, np.asarray(base.nu_hat) - math.log(3.0), atol=1e-8)


def test_single_subject_fse_intercept(subject_factory):
    s = subject_factory("only", [0.2, 0.7], [2, 4], x=np.zeros((2, 0)))
    panel = Panel(subjects=[s], z_names=("z1",), x_names=())
    fit = fit_gee(panel, FitConfig(use_fse=True))
    assert fit.nu_hat[0] == pytest.approx(math.log(3.0))
    assert fit.beta_hat.shape == (0,)
    assert fit.cov_nu_given_nu[0, 0] == pytest.approx(1.0 / 6.0)


def test_all_zero_subject_is_dropped_under_fse(small_panel, subject_factory):
    zero = subject_factory("z", [0.1, 0.4, 0.8], [0, 0, 0], z=(1.0,))
    panel = Panel(subjects=list(small_panel.subjects) + [zero], z_names=("z1",), x_names=("x1",))
    fit = fit_gee(panel, FitConfig(use_fse=True))
    assert not fit.na_flag
    assert fit.dropped_subjects == ["z"]
    assert fit.subject_ids == ["a", "b", "c"]
    assert len(fit.fitted) == 3


def test_fse_with_every_subject_zero_is_na(subject_factory):
    panel = Panel(
        subjects=[subject_factory("a", [0.1, 0.2], [0, 0]), subject_factory("b", [0.1, 0.2], [0, 0])],
        z_names=("z1",), x_names=("x1",),
    )
    fit = fit_gee(panel, FitConfig(use_fse=True))
    assert fit.na_flag
    assert fit.na_reason


def test_fse_requires_two_trips(subject_factory):
    panel = Panel(
        subjects=[subject_factory("a", [0.1], [1]), subject_factory("b", [0.1, 0.2], [0, 2])],
        z_names=("z1",), x_names=("x1",),
    )
    with pytest.raises(ValueError):
        fit_gee(panel, FitConfig(use_fse=True))


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig(working_cov=WorkingCovariance.SUPPLIED)
    with pytest.raises(ValueError):
        FitConfig(one_step=True)
    cov = CovParamEstimate(sigma2_c=1.0, sigma2_e=1.0, gamma=50.0)
    with pytest.raises(ValueError):
        FitConfig(use_fse=False, working_cov=WorkingCovariance.SUPPLIED, cov_params=cov)
    FitConfig(use_fse=True, working_cov=WorkingCovariance.SUPPLIED, cov_params=cov, one_step=True)


def test_working_covariance_structure(subject_factory):
    s = subject_factory("a", [0.1, 0.15, 0.5], [1, 2, 3])
    mu = np.array([1.0, 2.0, 0.5])
    cov = CovParamEstimate(sigma2_b=0.3, sigma2_c=1.0, sigma2_e=0.5, gamma=20.0, method=CovMethod.NO_FSE)

    fse = assemble_working_covariance(s, mu, cov, use_fse=True)
    np.testing.assert_allclose(fse, fse.T)
    np.testing.assert_allclose(np.diag(fse), mu + mu ** 2 * math.expm1(1.5))
    assert fse[0, 1] == pytest.approx(2.0 * math.expm1(math.exp(-20.0 * 0.05)))

    marginal = assemble_working_covariance(s, mu, cov, use_fse=False)
    np.testing.assert_allclose(np.diag(marginal), mu + mu ** 2 * math.expm1(1.8))
    assert marginal[0, 2] == pytest.approx(0.5 * math.expm1(0.3 + math.exp(-20.0 * 0.4)))

    far = assemble_working_covariance(s, mu, cov.model_copy(update={"gamma": 1e6}), use_fse=True)
    np.testing.assert_allclose(far - np.diag(np.diag(far)), 0.0)


def test_supplied_independence_covariance_reproduces_independence(goup_panel):
    base = fit_gee(goup_panel, FitConfig(use_fse=True))
    null_cov = CovParamEstimate(sigma2_c=0.0, sigma2_e=0.0, gamma=1.0)
    supplied = fit_gee(goup_panel, FitConfig(use_fse=True, working_cov=WorkingCovariance.SUPPLIED,
                                             cov_params=null_cov))
    np.testing.assert_allclose(supplied.coef, base.coef, atol=1e-8)
    np.testing.assert_allclose(supplied.cov_model, base.cov_model, rtol=1e-6, atol=1e-12)


def test_one_step_goup_fit(goup_panel):
    cov = CovParamEstimate(sigma2_c=1.0, sigma2_e=1.0, gamma=300.0)
    config = FitConfig(use_fse=True, working_cov=WorkingCovariance.SUPPLIED, cov_params=cov, one_step=True)
    fit = fit_gee(goup_panel, config)
    assert not fit.na_flag
    assert np.all(np.isfinite(fit.cov_robust)) and np.all(np.isfinite(fit.cov_model))
    assert fit.standard_error("beta:x1") > 0

    again = sandwich_variance(goup_panel, fit, config)
    np.testing.assert_allclose(again.cov_robust, fit.cov_robust, rtol=1e-10)
    np.testing.assert_allclose(again.cov_nu_given_nu, fit.cov_nu_given_nu, rtol=1e-10)


def test_variance_kind_selection(goup_panel):
    robust_only = fit_gee(goup_panel, FitConfig(variance_kind=VarianceKind.ROBUST))
    assert robust_only.cov_model is None and robust_only.cov_robust is not None
    model_only = fit_gee(goup_panel, FitConfig(variance_kind=VarianceKind.MODEL_BASED))
    assert model_only.cov_robust is None
    assert model_only.theta_cov(VarianceKind.MODEL_BASED).shape == (2, 2)


def test_fit_report_and_theta(goup_panel):
    fit = fit_gee(goup_panel, FitConfig())
    assert fit.param_names == ["nu", "alpha:z1", "beta:x1"]
    assert fit.theta_names == ["alpha:z1", "beta:x1"]
    np.testing.assert_allclose(fit.theta(), np.asarray(fit.coef)[1:])
    report = fit.to_report()
    assert report["converged"] and report["se_robust"].shape == (3,)

    fse = fit_gee(goup_panel, FitConfig(use_fse=True))
    assert fse.theta_names == ["beta:x1"]
    assert fse.param_names[0] == "nu:1"


def test_working_variances(goup_panel):
    fit = fit_gee(goup_panel, FitConfig(use_fse=True))
    plain = working_variances(goup_panel, fit)
    np.testing.assert_allclose(plain[0], fit.fitted[0])
    cov = CovParamEstimate(sigma2_c=1.0, sigma2_e=0.5, gamma=50.0)
    inflated = working_variances(goup_panel, fit, cov)
    mu = np.asarray(fit.fitted[1])
    np.testing.assert_allclose(inflated[1], mu + mu * mu * math.expm1(1.5))
