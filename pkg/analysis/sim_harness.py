"""
Monte Carlo scenario runner.

A Scenario fixes the data-generating model, the design and a list of
estimators. Every replicate simulates one panel from seed ^ r, runs each
estimator on it and records (estimate, standard error, NA) per parameter.
Summaries are computed from the full collected results, so they do not
depend on how replicates were scheduled over workers.
"""
import enum
import itertools
import logging
import math
from multiprocessing import Pool
from typing import Any, Callable, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from analysis.cov_estimation import fit_covariance
from analysis.gee_core import FitConfig, GeeFit, fit_gee
from analysis.models import CovMethod, VarianceKind, WorkingCovariance
from analysis.simulate import ConstantGamma, DesignSpec, GoupParams, LinearGamma, calibrated, simulate_panel
from analysis.subject_level import alpha_irls, alpha_ls
from analysis.wcr import SamplingScheme, SeparatedBlocks, Srs, run_wcr
from constants import DESK_SCALE, WALD_Z, WCR_BLOCK, WCR_REPS, WCR_SEP
from data.data_models import Panel
from utils import replicate_seed, stream_rng

logger = logging.getLogger(__name__)

COV_PARAMS = ["sigma2_b", "sigma2_c", "sigma2_e", "gamma"]
SUMMARY_COLUMNS = ["estimator", "param", "bias", "sd", "median_se", "cp", "pct_na"]


class EstimatorKind(str, enum.Enum):
    GEE = "gee"
    ALPHA_LS = "alpha-ls"
    ALPHA_IRLS = "alpha-irls"
    COVARIANCE = "covariance"
    WCR = "wcr"
    CUSTOM = "custom"


# custom estimators: (panel, rng) -> {param: (estimate, standard error)}; None means NA
CustomEstimator = Callable[[Panel, np.random.Generator], Optional[dict[str, tuple[float, float]]]]


class EstimatorConfig(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    label: str
    kind: EstimatorKind = EstimatorKind.GEE
    use_fse: bool = False
    working: WorkingCovariance = WorkingCovariance.INDEPENDENCE
    one_step: bool = False
    variance: VarianceKind = VarianceKind.ROBUST
    cov_method: CovMethod = CovMethod.FSE_LS
    scheme: Optional[SamplingScheme] = None
    L: int = Field(WCR_REPS, ge=1)
    params: Optional[list[str]] = None
    custom: Optional[CustomEstimator] = None

    @model_validator(mode="after")
    def _check_kind(self):
        if self.variance == VarianceKind.BOTH:
            raise ValueError("an estimator row designates a single variance kind")
        if self.kind == EstimatorKind.WCR and self.scheme is None:
            raise ValueError("a WCR estimator needs a sampling scheme")
        if self.kind == EstimatorKind.CUSTOM and (self.custom is None or not self.params):
            raise ValueError("a custom estimator needs a callable and its parameter names")
        return self


class Scenario(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    name: str = "scenario"
    design: DesignSpec
    params: GoupParams
    estimators: list[EstimatorConfig]
    replicates: int = Field(..., ge=1)
    seed: int = Field(0, ge=0)
    # overrides or extends the true values implied by `params`
    true_theta: dict[str, float] = Field(default_factory=dict)

    def truth(self) -> dict[str, float]:
        values = {f"alpha:z{j + 1}": a for j, a in enumerate(self.params.alpha)}
        values.update({f"beta:x{j + 1}": b for j, b in enumerate(self.params.beta)})
        gamma = self.params.gamma.gamma if isinstance(self.params.gamma, ConstantGamma) else math.nan
        values.update(sigma2_b=self.params.sigma2_b, sigma2_c=self.params.sigma2_c,
                      sigma2_e=self.params.sigma2_e, gamma=gamma)
        values.update(self.true_theta)
        return values

    def param_names(self, estimator: EstimatorConfig) -> list[str]:
        if estimator.params is not None:
            return list(estimator.params)
        alpha = [f"alpha:z{j + 1}" for j in range(len(self.design.z_prob))]
        beta = [f"beta:x{j + 1}" for j in range(len(self.params.beta))]
        if estimator.kind in (EstimatorKind.ALPHA_LS, EstimatorKind.ALPHA_IRLS):
            return alpha
        if estimator.kind == EstimatorKind.COVARIANCE:
            return list(COV_PARAMS)
        return beta if estimator.use_fse else alpha + beta


class Estimate(BaseModel):
    value: float = math.nan
    se: float = math.nan
    na: bool = False


class SummaryRow(BaseModel):
    estimator: str
    param: str
    bias: float
    sd: float
    median_se: float
    cp: float
    pct_na: float = Field(..., ge=0, le=100)
    n_used: int


class ScenarioSummary(BaseModel):
    name: str
    replicates: int
    seed: int
    rows: list[SummaryRow]

    def row(self, estimator: str, param: str) -> SummaryRow:
        return next(r for r in self.rows if r.estimator == estimator and r.param == param)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.model_dump() for r in self.rows], columns=SUMMARY_COLUMNS)


class _Replicate:
    """One simulated panel with the fits shared between estimators."""

    def __init__(self, panel: Panel, seed: int):
        self.panel = panel
        self.seed = seed
        self._fits: dict[Any, GeeFit] = {}
        self._covs = {}

    def cov_params(self, method: CovMethod):
        if method not in self._covs:
            self._covs[method] = fit_covariance(self.panel, method)
        return self._covs[method]

    def fit(self, use_fse: bool, working: WorkingCovariance, cov_method: CovMethod, one_step: bool) -> GeeFit:
        key = (use_fse, working, cov_method if working == WorkingCovariance.SUPPLIED else None, one_step)
        if key not in self._fits:
            cov = None
            if working == WorkingCovariance.SUPPLIED:
                cov = self.cov_params(cov_method)
                if cov.na_flag:
                    self._fits[key] = GeeFit.not_available(use_fse, f"covariance estimate NA: {cov.na_reason}")
                    return self._fits[key]
            config = FitConfig(use_fse=use_fse, working_cov=working, cov_params=cov, one_step=one_step)
            self._fits[key] = fit_gee(self.panel, config)
        return self._fits[key]


def _by_name(names, values, ses) -> dict[str, Estimate]:
    return {
        nm: Estimate(value=float(v), se=float(s), na=not (math.isfinite(v) and math.isfinite(s)))
        for nm, v, s in zip(names, values, ses)
    }


def _evaluate(estimator: EstimatorConfig, rep: _Replicate, index: int) -> dict[str, Estimate]:
    kind = estimator.kind
    if kind == EstimatorKind.GEE:
        fit = rep.fit(estimator.use_fse, estimator.working, estimator.cov_method, estimator.one_step)
        if fit.na_flag:
            return {}
        cov = fit.theta_cov(estimator.variance)
        return _by_name(fit.theta_names, fit.theta(), np.sqrt(np.clip(np.diag(cov), 0, None)))

    if kind in (EstimatorKind.ALPHA_LS, EstimatorKind.ALPHA_IRLS):
        fit = rep.fit(True, WorkingCovariance.INDEPENDENCE, estimator.cov_method, False)
        if fit.na_flag:
            return {}
        z = rep.panel.select(fit.subject_ids).z_matrix
        if kind == EstimatorKind.ALPHA_LS:
            result = alpha_ls(fit.nu_hat, z)
        else:
            result = alpha_irls(fit.nu_hat, z, fit.cov_nu_given_nu)
        if result.na_flag:
            return {}
        names = [f"alpha:{nm}" for nm in rep.panel.z_names]
        return _by_name(names, result.alpha_hat, result.standard_errors())

    if kind == EstimatorKind.COVARIANCE:
        est = rep.cov_params(estimator.cov_method)
        if est.na_flag:
            return {}
        values = {"sigma2_b": est.sigma2_b, "sigma2_c": est.sigma2_c, "sigma2_e": est.sigma2_e, "gamma": est.gamma}
        return {nm: Estimate(value=v, na=False) if v is not None else Estimate(na=True) for nm, v in values.items()}

    if kind == EstimatorKind.WCR:
        cov = None
        if estimator.working == WorkingCovariance.SUPPLIED:
            # estimated once from the full sample, applied to every subsample
            cov = rep.cov_params(estimator.cov_method)
            if cov.na_flag:
                return {}
        config = FitConfig(
            use_fse=estimator.use_fse, working_cov=estimator.working, cov_params=cov,
            one_step=estimator.one_step, variance_kind=estimator.variance,
        )
        result = run_wcr(rep.panel, estimator.scheme, estimator.L, config, seed=rep.seed, threads=1)
        if result.na_flag:
            return {}
        return _by_name(result.theta_names, result.theta_wcr, result.standard_errors())

    out = estimator.custom(rep.panel, stream_rng(rep.seed, index))
    if out is None:
        return {}
    return {nm: Estimate(value=v, se=s, na=not math.isfinite(v)) for nm, (v, s) in out.items()}


def _run_replicate(scenario: Scenario, r: int) -> list[dict[str, Estimate]]:
    seed = replicate_seed(scenario.seed, r)
    panel = simulate_panel(scenario.params, scenario.design, np.random.default_rng(seed))
    rep = _Replicate(panel, seed)
    results = []
    for index, estimator in enumerate(scenario.estimators):
        try:
            estimates = _evaluate(estimator, rep, index)
        except (ValueError, np.linalg.LinAlgError) as exc:
            logger.warning(f"replicate {r}, estimator {estimator.label}: {exc}")
            estimates = {}
        names = scenario.param_names(estimator)
        results.append({nm: estimates.get(nm, Estimate(na=True)) for nm in names})
    return results


def _summarize(label: str, param: str, truth: float, estimates: list[Estimate], replicates: int) -> SummaryRow:
    used = [e for e in estimates if not e.na]
    values = np.array([e.value for e in used])
    ses = np.array([e.se for e in used])
    finite_se = np.isfinite(ses)

    bias = float(values.mean() - truth) if values.size else math.nan
    sd = float(values.std(ddof=1)) if values.size >= 2 else math.nan
    median_se = float(np.median(ses[finite_se])) if finite_se.any() else math.nan
    if finite_se.any() and math.isfinite(truth):
        cp = float(np.mean(np.abs(values[finite_se] - truth) <= WALD_Z * ses[finite_se]))
    else:
        cp = math.nan
    pct_na = 100.0 * (replicates - len(used)) / replicates
    return SummaryRow(estimator=label, param=param, bias=bias, sd=sd, median_se=median_se,
                      cp=cp, pct_na=pct_na, n_used=len(used))


def run_scenario(scenario: Scenario, threads: int = 1) -> ScenarioSummary:
    """Run every replicate and summarize bias, SD, median SE, Wald coverage and %NA."""
    args = [(scenario, r) for r in range(scenario.replicates)]
    logger.info(f"scenario {scenario.name}: {scenario.replicates} replicates, {len(scenario.estimators)} estimators")
    if threads > 1 and scenario.replicates > 1:
        with Pool(processes=min(threads, scenario.replicates)) as pool:
            outcomes = pool.starmap(_run_replicate, args)
    else:
        outcomes = list(itertools.starmap(_run_replicate, args))

    truth = scenario.truth()
    rows = []
    for index, estimator in enumerate(scenario.estimators):
        for param in scenario.param_names(estimator):
            estimates = [outcome[index][param] for outcome in outcomes]
            rows.append(_summarize(estimator.label, param, truth.get(param, math.nan), estimates, scenario.replicates))
    return ScenarioSummary(name=scenario.name, replicates=scenario.replicates, seed=scenario.seed, rows=rows)


SERIAL = {
    "short": ConstantGamma(gamma=300.0),
    "long": ConstantGamma(gamma=50.0),
    "varying": LinearGamma(gamma0=300.0, gamma1=50.0),
}

_ALPHA = ["alpha:z1"]
_BETA = ["beta:x1"]


def _alpha_estimators() -> list[EstimatorConfig]:
    return [
        EstimatorConfig(label="nofse-robust", variance=VarianceKind.ROBUST, params=_ALPHA),
        EstimatorConfig(label="nofse-model", variance=VarianceKind.MODEL_BASED, params=_ALPHA),
        EstimatorConfig(label="fse-ls", kind=EstimatorKind.ALPHA_LS),
        EstimatorConfig(label="fse-irls", kind=EstimatorKind.ALPHA_IRLS),
    ]


def _beta_estimators() -> list[EstimatorConfig]:
    return [
        EstimatorConfig(label=f"{'fse' if fse else 'nofse'}-{kind.value}", use_fse=fse, variance=kind, params=_BETA)
        for fse in (False, True)
        for kind in (VarianceKind.ROBUST, VarianceKind.MODEL_BASED)
    ]


def _goup_beta_estimators() -> list[EstimatorConfig]:
    ecm = [
        EstimatorConfig(
            label=f"goup-{kind.value}", use_fse=True, working=WorkingCovariance.SUPPLIED,
            one_step=True, variance=kind, params=_BETA,
        )
        for kind in (VarianceKind.ROBUST, VarianceKind.MODEL_BASED)
    ]
    return ecm + [EstimatorConfig(label="fse-indep-robust", use_fse=True, params=_BETA)]


def _covariance_estimators() -> list[EstimatorConfig]:
    return [
        EstimatorConfig(label=method.value, kind=EstimatorKind.COVARIANCE, cov_method=method)
        for method in CovMethod
    ]


def _scaled_reps(L: int, scale: float) -> int:
    return max(WCR_REPS, round(L * scale)) if L > WCR_REPS else L


def _srs_estimators(scale: float, k: int) -> list[EstimatorConfig]:
    grid = [(1, 1), (5, 1), (25, 1), (100, 1), (500, 1), (100, 500)]
    estimators = []
    for fse in (False, True):
        for R, L in grid:
            if R > k or (fse and R < 2):
                continue
            L_scaled = _scaled_reps(L, scale)
            estimators.append(EstimatorConfig(
                label=f"srs-R{R}-L{L_scaled}-{'fse' if fse else 'nofse'}", kind=EstimatorKind.WCR,
                use_fse=fse, scheme=Srs(R=R), L=L_scaled, params=_BETA,
            ))
    # FSE with the estimated GOUP covariance as working covariance
    for R, L in grid:
        if R > k or R < 2:
            continue
        L_scaled = _scaled_reps(L, scale)
        for kind in (VarianceKind.ROBUST, VarianceKind.MODEL_BASED):
            estimators.append(EstimatorConfig(
                label=f"srs-R{R}-L{L_scaled}-goup-{kind.value}", kind=EstimatorKind.WCR, use_fse=True,
                working=WorkingCovariance.SUPPLIED, one_step=True, variance=kind, scheme=Srs(R=R), L=L_scaled,
                params=_BETA,
            ))
    return estimators


def _block_estimators() -> list[EstimatorConfig]:
    scheme = SeparatedBlocks(B=WCR_BLOCK, S=WCR_SEP)
    return [
        EstimatorConfig(label=f"sb-L{L}", kind=EstimatorKind.WCR, use_fse=True, scheme=scheme, L=L, params=_BETA)
        for L in (1, WCR_REPS)
    ] + [EstimatorConfig(label="full-robust", use_fse=True, params=_BETA)]


def _scenario(name: str, serial: str, mean: float, estimators, scale: float) -> Scenario:
    design = DesignSpec(n_subjects=40, trips_per_subject=max(2, round(1500 * scale)), target_mean_count=mean)
    params = calibrated(
        GoupParams(alpha=(0.0,), beta=(0.0,), sigma2_b=1.0, sigma2_c=1.0, sigma2_e=1.0, gamma=SERIAL[serial]),
        design,
    )
    return Scenario(name=name, design=design, params=params, estimators=estimators,
                    replicates=max(1, round(1000 * scale)))


def preset_scenarios(scale: float = DESK_SCALE) -> dict[str, Scenario]:
    """
    Named presets for the simulation study. Full names are
    "<family>-<serial>-m<mean>"; "<family>-<serial>" uses the family's default
    mean count and "<family>" additionally its first serial setting.
    """
    if not 0 < scale <= 1:
        raise ValueError("scale must lie in (0, 1]")
    k = max(2, round(1500 * scale))
    families = [
        # family, serial settings, mean counts (default first), estimators
        ("alpha", ["short", "long"], [1.0, 0.1], _alpha_estimators),
        ("beta", ["short", "long"], [1.0, 0.1], _beta_estimators),
        ("beta-goup", ["short", "long", "varying"], [1.0, 0.1], _goup_beta_estimators),
        ("covariance", ["short", "long"], [10.0, 1.0, 0.1], _covariance_estimators),
        ("wcr-srs", ["short", "long"], [0.1], lambda: _srs_estimators(scale, k)),
        ("wcr-sb", ["short", "long", "varying"], [0.1], _block_estimators),
    ]
    presets: dict[str, Scenario] = {}
    for family, serials, means, make in families:
        for serial in serials:
            for mean in means:
                name = f"{family}-{serial}-m{mean:g}"
                presets[name] = _scenario(name, serial, mean, make(), scale)
            presets[f"{family}-{serial}"] = presets[f"{family}-{serial}-m{means[0]:g}"]
        presets[family] = presets[f"{family}-{serials[0]}-m{means[0]:g}"]
    return presets
