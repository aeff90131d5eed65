"""
Second-stage regression of estimated fixed subject effects on subject-level
covariates: ordinary least squares, and iteratively reweighted least squares
that accounts for the estimation error in each nu_hat_i.
"""
import enum
import logging
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.linalg import cho_factor, cho_solve

from constants import IRLS_MAX_ITER, IRLS_SINGULAR_RTOL, IRLS_TOL

logger = logging.getLogger(__name__)


class AlphaMethod(str, enum.Enum):
    LS = "ls"
    IRLS = "irls"


class AlphaFit(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    alpha_hat: np.ndarray
    intercept: float
    cov_alpha: np.ndarray
    # covariance of (intercept, alpha)
    cov_coef: np.ndarray
    sigma2_b_hat: float = Field(..., ge=0)
    residual_variance: float = Field(..., ge=0)
    method: AlphaMethod
    iterations: int = 0
    converged: bool = True
    na_flag: bool = False
    na_reason: Optional[str] = None

    @model_validator(mode="after")
    def _freeze(self):
        for name in ("alpha_hat", "cov_alpha", "cov_coef"):
            arr = np.array(getattr(self, name), dtype=np.float64, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        return self

    @classmethod
    def not_available(cls, p_z: int, method: AlphaMethod, reason: str) -> "AlphaFit":
        logger.warning(f"subject-level {method.value} regression not available: {reason}")
        nan = np.full(p_z, np.nan)
        return cls(
            alpha_hat=nan, intercept=float("nan"), cov_alpha=np.full((p_z, p_z), np.nan),
            cov_coef=np.full((p_z + 1, p_z + 1), np.nan), sigma2_b_hat=0.0, residual_variance=0.0,
            method=method, converged=False, na_flag=True, na_reason=reason,
        )

    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov_alpha), 0, None))

    def to_report(self) -> dict:
        return {
            "method": self.method.value,
            "intercept": self.intercept,
            "alpha_hat": self.alpha_hat,
            "se_alpha": self.standard_errors(),
            "cov_alpha": self.cov_alpha,
            "sigma2_b_hat": self.sigma2_b_hat,
            "iterations": self.iterations,
            "converged": self.converged,
            "na_flag": self.na_flag,
            "na_reason": self.na_reason,
        }


def _design(nu_hat, z) -> tuple[np.ndarray, np.ndarray]:
    nu_hat = np.asarray(nu_hat, dtype=np.float64).reshape(-1)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z.reshape(-1, 1)
    if z.shape[0] != nu_hat.shape[0]:
        raise ValueError(f"nu_hat has {nu_hat.shape[0]} entries but Z has {z.shape[0]} rows")
    design = np.hstack([np.ones((z.shape[0], 1)), z])
    if design.shape[0] < design.shape[1]:
        raise ValueError(f"need at least {design.shape[1]} subjects, got {design.shape[0]}")
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise ValueError("subject covariate matrix is rank deficient")
    return nu_hat, design


def _split(coef: np.ndarray, cov: np.ndarray):
    cov = 0.5 * (cov + cov.T)
    return float(coef[0]), coef[1:], cov[1:, 1:], cov


def alpha_ls(nu_hat, z) -> AlphaFit:
    """
    Least squares of nu_hat_i on (1, Z_i). The classical residual variance
    RSS / (n - p_z - 1) is reported as the sigma2_b estimate.
    """
    nu_hat, design = _design(nu_hat, z)
    n, q = design.shape
    gram_inv = np.linalg.inv(design.T @ design)
    coef = gram_inv @ design.T @ nu_hat
    resid = nu_hat - design @ coef
    dof = n - q
    if dof == 0:
        logger.warning("saturated subject-level LS fit: residual variance set to 0")
        s2 = 0.0
    else:
        s2 = float(resid @ resid) / dof
    intercept, alpha, cov_alpha, cov = _split(coef, s2 * gram_inv)
    return AlphaFit(
        alpha_hat=alpha, intercept=intercept, cov_alpha=cov_alpha, cov_coef=cov,
        sigma2_b_hat=s2, residual_variance=s2, method=AlphaMethod.LS, iterations=1,
    )


def alpha_irls(
    nu_hat,
    z,
    cov_nu_given_nu,
    max_iter: int = IRLS_MAX_ITER,
    tol: float = IRLS_TOL,
) -> AlphaFit:
    """
    Alternate between
      1. sigma2_b = max(0, mean squared residual - mean diag(Sigma_nu|nu)),
      2. weighted LS with weights (sigma2_b I + Sigma_nu|nu)^-1,
    starting from the LS estimate.
    """
    nu_hat, design = _design(nu_hat, z)
    n, q = design.shape
    p_z = q - 1
    sigma_cond = np.asarray(cov_nu_given_nu, dtype=np.float64)
    if sigma_cond.shape != (n, n):
        raise ValueError(f"cov_nu_given_nu must be {n}x{n}, got {sigma_cond.shape}")
    sigma_cond = 0.5 * (sigma_cond + sigma_cond.T)
    mean_diag = float(np.mean(np.diag(sigma_cond)))
    max_diag = float(np.max(np.diag(sigma_cond))) if n else 0.0
    floor = IRLS_SINGULAR_RTOL * max(1.0, float(np.var(nu_hat)))

    coef = np.linalg.lstsq(design, nu_hat, rcond=None)[0]
    sigma2_b = 0.0
    info = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        resid = nu_hat - design @ coef
        sigma2_b = max(0.0, float(np.mean(resid * resid)) - mean_diag)
        if sigma2_b + max_diag <= floor:
            return AlphaFit.not_available(
                p_z, AlphaMethod.IRLS,
                f"weight matrix is singular: sigma2_b + max Sigma_nu|nu = {sigma2_b + max_diag:.3g}",
            )
        weight = sigma2_b * np.eye(n) + sigma_cond
        try:
            factor = cho_factor(weight, lower=True)
            info = design.T @ cho_solve(factor, design)
            new_coef = np.linalg.solve(info, design.T @ cho_solve(factor, nu_hat))
        except np.linalg.LinAlgError as exc:
            return AlphaFit.not_available(p_z, AlphaMethod.IRLS, f"weight matrix is singular: {exc}")
        change = float(np.max(np.abs(new_coef - coef)))
        coef = new_coef
        logger.debug(f"IRLS iteration {it}: sigma2_b={sigma2_b:.6g} change={change:.3e}")
        if change < tol:
            converged = True
            break

    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        return AlphaFit.not_available(p_z, AlphaMethod.IRLS, f"weighted normal matrix is singular: {exc}")
    resid = nu_hat - design @ coef
    intercept, alpha, cov_alpha, cov = _split(coef, cov)
    return AlphaFit(
        alpha_hat=alpha, intercept=intercept, cov_alpha=cov_alpha, cov_coef=cov,
        sigma2_b_hat=sigma2_b, residual_variance=float(np.mean(resid * resid)),
        method=AlphaMethod.IRLS, iterations=it, converged=converged,
    )
