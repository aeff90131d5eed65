import math

import numpy as np
import pytest
from scipy import integrate

from analysis.simulate import (ConstantGamma, DesignSpec, GoupParams, LinearGamma, calibrate_nu_star, calibrated,
                               sample_ou_path, simulate_panel)


def test_linear_gamma_integral_matches_quadrature():
    gamma = LinearGamma(gamma0=300.0, gamma1=50.0)
    for t1, t2 in [(0.0, 1.0), (0.2, 0.25), (0.6, 0.61)]:
        expected, _ = integrate.quad(lambda t: float(gamma.rate(t)), t1, t2)
        assert float(gamma.integral(t1, t2)) == pytest.approx(expected, rel=1e-10)


def test_constant_gamma_integral():
    gamma = ConstantGamma(gamma=50.0)
    np.testing.assert_allclose(gamma.integral([0.0, 0.1], [0.1, 0.3]), [5.0, 10.0])


def test_gamma_spec_parses_by_kind():
    params = GoupParams.model_validate({"gamma": {"kind": "linear", "gamma0": 300, "gamma1": 50}})
    assert isinstance(params.gamma, LinearGamma)
    assert GoupParams().sigma2_total == 3.0


def test_sample_ou_path_preconditions():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sample_ou_path([0.5, 0.1], 1.0, ConstantGamma(gamma=50.0), rng)
    path = sample_ou_path([0.1, 0.2, 0.3], 0.0, ConstantGamma(gamma=50.0), rng, size=4)
    assert path.shape == (4, 3)
    assert not path.any()


@pytest.mark.parametrize(
    "gamma",
    [ConstantGamma(gamma=50.0), ConstantGamma(gamma=300.0), LinearGamma(gamma0=300.0, gamma1=50.0)],
)
def test_ou_covariance_matches_integrated_decay(gamma):
    times = np.array([0.30, 0.301, 0.305, 0.31, 0.32, 0.35])
    n_paths = 100_000
    paths = sample_ou_path(times, 1.0, gamma, np.random.default_rng(2024), size=n_paths)

    assert paths[:, 0].var() == pytest.approx(1.0, abs=4 * math.sqrt(2.0 / n_paths))
    for j in range(1, times.shape[0]):
        rho = math.exp(-float(gamma.integral(times[0], times[j])))
        empirical = float(np.mean(paths[:, 0] * paths[:, j]))
        mc_se = math.sqrt((1.0 + rho * rho) / n_paths)
        assert abs(empirical - rho) < 4 * mc_se


def test_simulate_panel_shape_and_determinism():
    design = DesignSpec(n_subjects=3, trips_per_subject=20, target_mean_count=1.0)
    params = calibrated(GoupParams(), design)
    first = simulate_panel(params, design, np.random.default_rng(5))
    second = simulate_panel(params, design, np.random.default_rng(5))
    other = simulate_panel(params, design, np.random.default_rng(6))

    assert first.equals(second)
    assert not first.equals(other)
    assert first.subject_ids == ["1", "2", "3"]
    assert first.z_names == ("z1",) and first.x_names == ("x1",)
    for s in first.subjects:
        assert s.k == 20
        np.testing.assert_array_equal(s.trip_covariates[:, 0], s.times)
        assert np.all(np.diff(s.times) >= 0)
        assert s.subject_covariates[0] in (0.0, 1.0)


def test_simulate_panel_checks_dimensions():
    design = DesignSpec(n_subjects=2, trips_per_subject=5)
    with pytest.raises(ValueError):
        simulate_panel(GoupParams(alpha=(0.0, 1.0)), design, np.random.default_rng(0))
    with pytest.raises(ValueError):
        simulate_panel(GoupParams(beta=(0.0, 1.0)), design, np.random.default_rng(0))


def test_calibrate_nu_star_closed_form():
    design = DesignSpec(offset_log_mean=0.5, offset_log_var=0.4, z_prob=(0.3,), target_mean_count=2.0)
    params = GoupParams(alpha=(0.7,), beta=(1.2,), sigma2_b=0.5, sigma2_c=0.25, sigma2_e=0.25)
    nu = calibrate_nu_star(design, params)
    mean_t = math.expm1(1.2) / 1.2
    mean_z = 0.7 + 0.3 * math.exp(0.7)
    implied = math.exp(nu + 0.5 + 0.2 + 0.5) * mean_z * mean_t
    assert implied == pytest.approx(2.0, rel=1e-12)


def test_calibrate_nu_star_requires_target():
    with pytest.raises(ValueError):
        calibrate_nu_star(DesignSpec(), GoupParams())
    with pytest.raises(ValueError):
        calibrate_nu_star(DesignSpec(target_mean_count=1.0), GoupParams(beta=(0.1, 0.2)))


def test_calibrated_mean_count():
    design = DesignSpec(n_subjects=200, trips_per_subject=200, target_mean_count=1.0)
    params = calibrated(GoupParams(sigma2_b=0.0, sigma2_c=0.5, sigma2_e=0.5, gamma=ConstantGamma(gamma=300.0)), design)
    panel = simulate_panel(params, design, np.random.default_rng(17))
    mean = sum(int(s.counts.sum()) for s in panel.subjects) / panel.n_obs
    assert mean == pytest.approx(1.0, rel=0.1)


@pytest.mark.slow
def test_marginal_mean_and_variance_formula():
    design = DesignSpec(n_subjects=20_000, trips_per_subject=50, offset_log_mean=0.0, offset_log_var=0.0,
                        target_mean_count=10.0)
    params = calibrated(
        GoupParams(sigma2_b=0.2, sigma2_c=0.2, sigma2_e=0.2, gamma=ConstantGamma(gamma=50.0)), design
    )
    panel = simulate_panel(params, design, np.random.default_rng(99))
    counts = np.concatenate([s.counts for s in panel.subjects]).astype(float)
    mu = 10.0
    assert counts.mean() == pytest.approx(mu, rel=0.05)
    assert counts.var() == pytest.approx(mu + mu * mu * math.expm1(0.6), rel=0.05)


@pytest.mark.slow
@pytest.mark.parametrize("sigma2_b", [0.2, 0.0])
def test_serial_covariance_formula(sigma2_b):
    # with sigma2_b = 0 the moments are those given the subject effect
    sigma2_c, sigma2_e, gamma, mu = 0.2, 0.2, 50.0, 10.0
    design = DesignSpec(n_subjects=20_000, trips_per_subject=50, offset_log_mean=0.0, offset_log_var=0.0,
                        target_mean_count=mu)
    params = calibrated(
        GoupParams(sigma2_b=sigma2_b, sigma2_c=sigma2_c, sigma2_e=sigma2_e, gamma=ConstantGamma(gamma=gamma)),
        design,
    )
    panel = simulate_panel(params, design, np.random.default_rng(123))
    counts = np.concatenate([s.counts for s in panel.subjects]).astype(float)
    assert counts.var() == pytest.approx(mu + mu * mu * math.expm1(sigma2_b + sigma2_c + sigma2_e), rel=0.05)

    centre = counts.mean()
    for lag in (1, 2):
        products, expected = [], []
        for s in panel.subjects:
            d = s.counts.astype(float) - centre
            gap = s.times[lag:] - s.times[:-lag]
            products.append(d[lag:] * d[:-lag])
            expected.append(mu * mu * np.expm1(sigma2_b + sigma2_c * np.exp(-gamma * gap)))
        assert np.mean(np.concatenate(products)) == pytest.approx(np.mean(np.concatenate(expected)), rel=0.05)
