"""
Covariance-parameter estimation from working-independence residuals.

The total log-variance comes from a moment estimator on squared Pearson-type
residuals; the serial parameters come from a nonlinear regression of
residual cross products on gap time:

    E[r_j r_j'] = exp(sigma2_c exp(-gamma |t_j - t_j'|)) - 1            (FSE)
    E[r_j r_j'] = exp(sigma2_b + sigma2_c exp(-gamma |t_j - t_j'|)) - 1  (no FSE)

with r = (Y - mu) / mu. Starting values come from a log-log regression on
binned products.
"""
import enum
import logging
import math
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import stats

from analysis.gee_core import FitConfig, fit_gee
from analysis.models import CovMethod, CovParamEstimate
from analysis.subject_level import alpha_irls, alpha_ls
from constants import COV_BIN_EPS, COV_GAMMA_MAX, COV_GAMMA_MIN, COV_N_BINS, NLS_MAX_ITER, NLS_REL_TOL
from data.data_models import Panel

logger = logging.getLogger(__name__)

_FALLBACK_GAMMA = 100.0
_MIN_SIGMA2_C = 1e-8
_MAX_LOG_SIGMA2 = 5.0
_MAX_DAMPING = 1e16


class PairKind(str, enum.Enum):
    CONSECUTIVE = "consecutive"
    SYMMETRIC = "symmetric"


class ResidualPair(BaseModel):
    model_config = ConfigDict(frozen=True)

    gap: float = Field(..., ge=0)
    product: float
    kind: PairKind


class ResidualPairs(BaseModel):
    """Column-wise store of residual pairs; `symmetric` marks the kind."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    gap: np.ndarray
    product: np.ndarray
    symmetric: np.ndarray

    @property
    def size(self) -> int:
        return int(self.gap.shape[0])

    def records(self) -> list[ResidualPair]:
        return [
            ResidualPair(gap=float(g), product=float(p),
                         kind=PairKind.SYMMETRIC if s else PairKind.CONSECUTIVE)
            for g, p, s in zip(self.gap, self.product, self.symmetric)
        ]

    @classmethod
    def from_arrays(cls, gap, product, symmetric=None) -> "ResidualPairs":
        gap = np.asarray(gap, dtype=np.float64).reshape(-1)
        product = np.asarray(product, dtype=np.float64).reshape(-1)
        if symmetric is None:
            symmetric = np.zeros(gap.shape[0], dtype=bool)
        return cls(gap=gap, product=product, symmetric=np.asarray(symmetric, dtype=bool).reshape(-1))


class InitialValues(BaseModel):
    sigma2_c: float = float("nan")
    gamma: float = float("nan")
    sigma2_b: Optional[float] = None
    bins_used: int = 0
    na_flag: bool = False
    na_reason: Optional[str] = None


class NlsResult(BaseModel):
    sigma2_b: Optional[float] = None
    sigma2_c: float
    gamma: float
    converged: bool
    iterations: int
    objective_trace: list[float]
    reason: Optional[str] = None


def _relative_residuals(panel: Panel, fitted):
    if len(fitted) != panel.n:
        raise ValueError(f"fitted means given for {len(fitted)} subjects, panel has {panel.n}")
    for s, mu in zip(panel.subjects, fitted):
        mu = np.asarray(mu, dtype=np.float64)
        if mu.shape[0] != s.k or np.any(mu <= 0):
            raise ValueError(f"fitted means for subject {s.subject_id} must be positive and of length {s.k}")
        yield s, mu


def build_pairs(panel: Panel, fitted) -> ResidualPairs:
    """Consecutive pairs (j, j+1) and symmetric pairs (j, k+1-j), per subject."""
    gaps, products, kinds = [], [], []
    for s, mu in _relative_residuals(panel, fitted):
        r = (s.counts - mu) / mu
        k = s.k
        gaps.append(np.diff(s.times))
        products.append(r[:-1] * r[1:])
        kinds.append(np.zeros(k - 1, dtype=bool))
        half = np.arange(k // 2)
        mirror = k - 1 - half
        gaps.append(s.times[mirror] - s.times[half])
        products.append(r[half] * r[mirror])
        kinds.append(np.ones(half.shape[0], dtype=bool))
    return ResidualPairs.from_arrays(np.concatenate(gaps), np.concatenate(products), np.concatenate(kinds))


def moment_total_variance(panel: Panel, fitted, use_fse: bool) -> float:
    """
    log(1 + mean{(Y - mu)^2 / mu^2 - 1/mu}), clamped at 0.

    Estimates sigma2_c + sigma2_e with FSE and sigma2_b + sigma2_c + sigma2_e
    without. The Poisson part 1/mu is subtracted so that pure Poisson data
    gives zero in expectation.
    """
    total, count = 0.0, 0
    for s, mu in _relative_residuals(panel, fitted):
        total += float(np.sum(((s.counts - mu) ** 2 - mu) / (mu * mu)))
        count += s.k
    excess = total / count
    if excess <= 0:
        logger.info(f"moment estimate of exp(total variance) - 1 is {excess:.4g}; clamped to 0 ({'FSE' if use_fse else 'no FSE'})")
        return 0.0
    return math.log1p(excess)


def initial_values(pairs: ResidualPairs, n_bins: int = COV_N_BINS, sigma2_b: Optional[float] = None) -> InitialValues:
    """
    Regress log log(mean product + 1 [- sigma2_b]) on median gap over
    equal-count gap bins; intercept gives log sigma2_c, minus the slope gives gamma.
    """
    if pairs.size < 2:
        return InitialValues(na_flag=True, na_reason="fewer than 2 residual pairs")
    order = np.lexsort((pairs.product, pairs.gap))
    bins = np.array_split(order, min(n_bins, pairs.size))
    median_gap = np.array([np.median(pairs.gap[b]) for b in bins])
    mean_product = np.array([np.mean(pairs.product[b]) for b in bins])

    level = np.log1p(np.maximum(mean_product, 0.0))
    if sigma2_b is not None:
        level = level - sigma2_b
    usable = level > np.log1p(COV_BIN_EPS)
    if np.count_nonzero(usable) < len(bins):
        logger.info(f"dropping {len(bins) - np.count_nonzero(usable)} of {len(bins)} bins without positive correlation")
    if np.count_nonzero(usable) < 2 or np.ptp(median_gap[usable]) == 0:
        return InitialValues(sigma2_b=sigma2_b, na_flag=True, na_reason="fewer than 2 usable bins")

    fit = stats.linregress(median_gap[usable], np.log(level[usable]))
    gamma = float(np.clip(-fit.slope, COV_GAMMA_MIN, COV_GAMMA_MAX))
    return InitialValues(
        sigma2_c=float(math.exp(fit.intercept)), gamma=gamma,
        sigma2_b=sigma2_b, bins_used=int(np.count_nonzero(usable)),
    )


def _mean_and_jacobian(log_params: np.ndarray, gap: np.ndarray, use_fse: bool):
    if use_fse:
        sigma2_b = 0.0
        log_c, log_g = log_params
    else:
        log_b, log_c, log_g = log_params
        sigma2_b = math.exp(log_b)
    sigma2_c, gamma = math.exp(log_c), math.exp(log_g)
    decay = np.exp(-gamma * gap)
    serial = sigma2_c * decay
    level = np.exp(sigma2_b + serial)
    mean = level - 1.0
    d_log_c = level * serial
    d_log_g = -level * serial * gamma * gap
    if use_fse:
        jac = np.column_stack([d_log_c, d_log_g])
    else:
        jac = np.column_stack([level * sigma2_b, d_log_c, d_log_g])
    return mean, jac


def nonlinear_fit(pairs: ResidualPairs, use_fse: bool, init, max_iter: int = NLS_MAX_ITER,
                  rel_tol: float = NLS_REL_TOL) -> NlsResult:
    """
    Levenberg-Marquardt least squares of products on the mean function,
    parameters on the log scale. `init` is anything with sigma2_c, gamma
    and (without FSE) sigma2_b attributes.
    """
    start = [math.log(max(init.sigma2_c, 1e-3)), math.log(min(max(init.gamma, COV_GAMMA_MIN), COV_GAMMA_MAX))]
    if not use_fse:
        start.insert(0, math.log(max(init.sigma2_b or 0.0, 1e-3)))
    params = np.array(start)
    lower = np.full(params.shape, -np.inf)
    upper = np.full(params.shape, _MAX_LOG_SIGMA2)
    lower[-1], upper[-1] = math.log(COV_GAMMA_MIN), math.log(COV_GAMMA_MAX)

    gap, product = pairs.gap, pairs.product
    mean, jac = _mean_and_jacobian(params, gap, use_fse)
    resid = product - mean
    objective = float(resid @ resid)
    trace = [objective]
    damping = 1e-3
    converged = False
    it = 0

    for it in range(1, max_iter + 1):
        jtj = jac.T @ jac
        grad = jac.T @ resid
        scaling = np.diag(np.diag(jtj))
        accepted = False
        while damping < _MAX_DAMPING:
            try:
                step = np.linalg.solve(jtj + damping * scaling, grad)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            candidate = np.clip(params + step, lower, upper)
            cand_mean, cand_jac = _mean_and_jacobian(candidate, gap, use_fse)
            cand_resid = product - cand_mean
            cand_obj = float(cand_resid @ cand_resid)
            if np.isfinite(cand_obj) and cand_obj <= objective:
                accepted = True
                break
            damping *= 10.0
        if not accepted:
            # no descent direction left at this precision
            converged = True
            break

        decrease = objective - cand_obj
        moved = float(np.max(np.abs(candidate - params)))
        params, mean, jac, resid, objective = candidate, cand_mean, cand_jac, cand_resid, cand_obj
        trace.append(objective)
        damping = max(damping / 10.0, 1e-12)
        if decrease <= rel_tol * max(objective, 1e-300) or objective < 1e-30 or moved < 1e-12:
            converged = True
            break

    values = np.exp(params)
    sigma2_b = None if use_fse else float(values[0])
    sigma2_c, gamma = float(values[-2]), float(values[-1])
    reason = None
    if not converged:
        reason = f"no convergence in {max_iter} iterations"
    elif params[-1] <= lower[-1] or params[-1] >= upper[-1]:
        reason = "gamma reached its bound"
    elif sigma2_c < _MIN_SIGMA2_C:
        reason = "sigma2_c collapsed to zero"
    if reason is not None:
        converged = False
        logger.info(f"nonlinear covariance fit did not converge: {reason}")
    return NlsResult(
        sigma2_b=sigma2_b, sigma2_c=sigma2_c, gamma=gamma, converged=converged,
        iterations=it, objective_trace=trace, reason=reason,
    )


def _sigma2_b_from_fse(method: CovMethod, fit, panel: Panel) -> Optional[float]:
    try:
        if method == CovMethod.FSE_IRLS:
            result = alpha_irls(fit.nu_hat, panel.z_matrix, fit.cov_nu_given_nu)
        else:
            result = alpha_ls(fit.nu_hat, panel.z_matrix)
    except ValueError as exc:
        logger.warning(f"sigma2_b not estimable from the subject-level regression: {exc}")
        return None
    return None if result.na_flag else result.sigma2_b_hat


def fit_covariance(panel: Panel, method: CovMethod = CovMethod.FSE_LS, n_bins: int = COV_N_BINS) -> CovParamEstimate:
    """
    Full covariance-parameter pipeline: working-independence GEE, moment
    estimate of the total variance, nonlinear regression on residual pairs,
    sigma2_e by subtraction. When the nonlinear fit fails the data-driven
    initial values are returned with converged=False.
    """
    use_fse = method != CovMethod.NO_FSE
    seed = None
    if not use_fse:
        seed = fit_covariance(panel, CovMethod.FSE_LS, n_bins)
        if seed.na_flag:
            return CovParamEstimate.not_available(method, f"FSE starting values unavailable: {seed.na_reason}")

    fit = fit_gee(panel, FitConfig(use_fse=use_fse))
    if fit.na_flag:
        return CovParamEstimate.not_available(method, f"working-independence fit failed: {fit.na_reason}")
    work = panel.select(fit.subject_ids)
    pairs = build_pairs(work, fit.fitted)
    total = moment_total_variance(work, fit.fitted, use_fse)

    if use_fse:
        sigma2_b = _sigma2_b_from_fse(method, fit, work)
        init = initial_values(pairs, n_bins)
    else:
        sigma2_b = seed.sigma2_b or 0.0
        init = initial_values(pairs, n_bins, sigma2_b=sigma2_b)
        if init.na_flag:
            init = InitialValues(sigma2_b=sigma2_b, sigma2_c=seed.sigma2_c, gamma=seed.gamma)

    if init.na_flag:
        logger.warning(f"{method.value}: {init.na_reason}; starting the nonlinear fit from defaults")
        start = InitialValues(sigma2_c=max(total / 2.0, 0.5), gamma=_FALLBACK_GAMMA, sigma2_b=sigma2_b)
    else:
        start = init

    nls = nonlinear_fit(pairs, use_fse, start)
    if nls.converged:
        sigma2_c, gamma = nls.sigma2_c, nls.gamma
        if not use_fse:
            sigma2_b = nls.sigma2_b
    elif init.na_flag:
        return CovParamEstimate.not_available(method, f"no initial values and nonlinear fit failed: {nls.reason}")
    else:
        logger.warning(f"{method.value}: nonlinear fit failed ({nls.reason}); using initial values")
        sigma2_c, gamma = init.sigma2_c, init.gamma

    sigma2_e = max(0.0, total - sigma2_c - (0.0 if use_fse else sigma2_b))
    estimate = CovParamEstimate(
        sigma2_b=sigma2_b, sigma2_c=sigma2_c, sigma2_e=sigma2_e, gamma=gamma,
        method=method, converged=nls.converged,
    )
    logger.info(f"{method.value} covariance estimate: {estimate.model_dump()}")
    return estimate
