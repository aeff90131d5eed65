"""
Marginal Poisson log-link GEE for long per-subject count sequences.

Two mean structures are supported: a common intercept with subject- and
trip-level covariates, or fixed subject effects (FSE) with trip-level
covariates only. Under FSE the normal equations are block-arrowhead and are
solved by eliminating each subject's intercept (Schur complement on the
beta block). Clusters for the sandwich are subjects, or the blocks of a
separated-block subsample when the panel carries block ids.
"""
import logging
import math
from typing import NamedTuple, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.linalg import cho_factor, cho_solve

from analysis.models import CovParamEstimate, VarianceKind, WorkingCovariance
from constants import GEE_MAX_HALVINGS, GEE_MAX_ITER, GEE_TOL
from data.data_models import Panel, Subject

logger = logging.getLogger(__name__)

_MAX_ETA = 700.0
_MAX_COND = 1e14


class FitConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    use_fse: bool = False
    working_cov: WorkingCovariance = WorkingCovariance.INDEPENDENCE
    cov_params: Optional[CovParamEstimate] = None
    variance_kind: VarianceKind = VarianceKind.BOTH
    max_iter: int = Field(GEE_MAX_ITER, gt=0)
    tol: float = Field(GEE_TOL, gt=0)
    one_step: bool = False
    max_halvings: int = Field(GEE_MAX_HALVINGS, ge=0)

    @model_validator(mode="after")
    def _check_consistency(self):
        if self.one_step and self.working_cov != WorkingCovariance.SUPPLIED:
            raise ValueError("one_step requires a supplied working covariance")
        if self.working_cov == WorkingCovariance.SUPPLIED:
            if self.cov_params is None:
                raise ValueError("a supplied working covariance needs cov_params")
            if self.cov_params.na_flag:
                raise ValueError("cov_params is not available (na_flag set)")
            if not self.use_fse and self.cov_params.sigma2_b is None:
                raise ValueError("a working covariance without FSE needs sigma2_b")
        return self


def _readonly(values):
    if values is None:
        return None
    values = np.array(values, dtype=np.float64, copy=True)
    values.setflags(write=False)
    return values


class GeeFit(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    use_fse: bool
    param_names: list[str]
    coef: np.ndarray
    beta_hat: np.ndarray
    alpha_hat: Optional[np.ndarray] = None
    nu_hat_global: Optional[float] = None
    nu_hat: Optional[np.ndarray] = None
    subject_ids: list[str]
    dropped_subjects: list[str] = Field(default_factory=list)
    cov_robust: Optional[np.ndarray] = None
    cov_model: Optional[np.ndarray] = None
    cov_nu_given_nu: Optional[np.ndarray] = None
    fitted: list[np.ndarray] = Field(default_factory=list)
    variance_kind: VarianceKind = VarianceKind.BOTH
    converged: bool = False
    iterations: int = 0
    na_flag: bool = False
    na_reason: Optional[str] = None

    @model_validator(mode="after")
    def _freeze_arrays(self):
        for name in ("coef", "beta_hat", "alpha_hat", "nu_hat", "cov_robust", "cov_model", "cov_nu_given_nu"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        object.__setattr__(self, "fitted", [_readonly(mu) for mu in self.fitted])
        return self

    @classmethod
    def not_available(cls, use_fse: bool, reason: str, subject_ids=(), dropped=(), iterations: int = 0) -> "GeeFit":
        logger.warning(f"GEE fit not available: {reason}")
        return cls(
            use_fse=use_fse, param_names=[], coef=np.zeros(0), beta_hat=np.zeros(0),
            subject_ids=list(subject_ids), dropped_subjects=list(dropped),
            converged=False, iterations=iterations, na_flag=True, na_reason=reason,
        )

    @property
    def theta_index(self) -> np.ndarray:
        """Positions of the non-nuisance parameters: (alpha, beta), or beta under FSE."""
        names = self.param_names
        if self.use_fse:
            return np.array([j for j, nm in enumerate(names) if nm.startswith("beta:")], dtype=np.int64)
        return np.array([j for j, nm in enumerate(names) if nm.startswith(("alpha:", "beta:"))], dtype=np.int64)

    @property
    def theta_names(self) -> list[str]:
        return [self.param_names[j] for j in self.theta_index]

    def theta(self) -> np.ndarray:
        return np.asarray(self.coef)[self.theta_index]

    def covariance(self, kind: VarianceKind = VarianceKind.ROBUST) -> Optional[np.ndarray]:
        if kind == VarianceKind.MODEL_BASED:
            return self.cov_model
        return self.cov_robust if self.cov_robust is not None else self.cov_model

    def theta_cov(self, kind: VarianceKind = VarianceKind.ROBUST) -> Optional[np.ndarray]:
        cov = self.covariance(kind)
        if cov is None:
            return None
        idx = self.theta_index
        return cov[np.ix_(idx, idx)]

    def standard_error(self, name: str, kind: VarianceKind = VarianceKind.ROBUST) -> float:
        cov = self.covariance(kind)
        if cov is None:
            return math.nan
        j = self.param_names.index(name)
        return float(math.sqrt(cov[j, j])) if cov[j, j] >= 0 else math.nan

    def to_report(self) -> dict:
        report = {
            "use_fse": self.use_fse,
            "converged": self.converged,
            "iterations": self.iterations,
            "na_flag": self.na_flag,
            "na_reason": self.na_reason,
            "subject_ids": self.subject_ids,
            "dropped_subjects": self.dropped_subjects,
            "param_names": self.param_names,
            "coef": self.coef,
            "beta_hat": self.beta_hat,
            "alpha_hat": self.alpha_hat,
            "nu_hat_global": self.nu_hat_global,
            "nu_hat": self.nu_hat,
        }
        for kind, cov in (("robust", self.cov_robust), ("model", self.cov_model)):
            if cov is not None:
                report[f"se_{kind}"] = np.sqrt(np.clip(np.diag(cov), 0, None))
                report[f"cov_{kind}"] = cov
        return report


class _Cluster(NamedTuple):
    owner: int
    y: np.ndarray
    log_m: np.ndarray
    design: np.ndarray
    times: np.ndarray


class _Layout:
    """Maps per-cluster local parameters to the global parameter vector."""

    def __init__(self, panel: Panel, use_fse: bool):
        self.use_fse = use_fse
        self.n = panel.n
        self.p_z = panel.p_z
        self.p_x = panel.p_x
        beta_names = [f"beta:{nm}" for nm in panel.x_names]
        if use_fse:
            self.names = [f"nu:{sid}" for sid in panel.subject_ids] + beta_names
            self.beta_slice = slice(self.n, self.n + self.p_x)
        else:
            self.names = ["nu"] + [f"alpha:{nm}" for nm in panel.z_names] + beta_names
            self.beta_slice = slice(1 + self.p_z, 1 + self.p_z + self.p_x)
        self.size = len(self.names)
        self._beta_idx = np.arange(self.size)[self.beta_slice]

    def indices(self, owner: int) -> np.ndarray:
        if self.use_fse:
            return np.concatenate(([owner], self._beta_idx))
        return np.arange(self.size)

    def local(self, theta: np.ndarray, owner: int) -> np.ndarray:
        if self.use_fse:
            return np.concatenate(([theta[owner]], theta[self.beta_slice]))
        return theta


def _local_design(subject: Subject, use_fse: bool) -> np.ndarray:
    ones = np.ones((subject.k, 1))
    if use_fse:
        return np.hstack([ones, subject.trip_covariates])
    z = np.tile(subject.subject_covariates, (subject.k, 1))
    return np.hstack([ones, z, subject.trip_covariates])


def _clusters(panel: Panel, use_fse: bool) -> list[_Cluster]:
    clusters = []
    for owner, s in enumerate(panel.subjects):
        design = _local_design(s, use_fse)
        y = s.counts.astype(np.float64)
        log_m = np.log(s.offsets)
        if s.block_ids is None:
            clusters.append(_Cluster(owner, y, log_m, design, s.times))
            continue
        for block in dict.fromkeys(s.block_ids.tolist()):
            rows = np.flatnonzero(s.block_ids == block)
            clusters.append(_Cluster(owner, y[rows], log_m[rows], design[rows], s.times[rows]))
    return clusters


def _working_covariance(times: np.ndarray, mu: np.ndarray, cov: CovParamEstimate, use_fse: bool) -> np.ndarray:
    if use_fse:
        shared = 0.0
    elif cov.sigma2_b is None:
        raise ValueError("a working covariance without FSE needs sigma2_b")
    else:
        shared = cov.sigma2_b
    gap = np.abs(times[:, None] - times[None, :])
    excess = np.expm1(shared + cov.sigma2_c * np.exp(-cov.gamma * gap))
    np.fill_diagonal(excess, np.expm1(shared + cov.sigma2_c + cov.sigma2_e))
    matrix = excess * np.outer(mu, mu)
    matrix[np.diag_indices_from(matrix)] += mu
    return matrix


def assemble_working_covariance(
    subject: Subject, mu: np.ndarray, cov: CovParamEstimate, use_fse: bool
) -> np.ndarray:
    """
    Working covariance of one subject's counts at fitted means `mu`.

    With FSE (conditional on the subject effect):
        var  = mu + mu^2 (exp(s2c + s2e) - 1)
        cov  = mu_j mu_j' (exp(s2c exp(-gamma |t_j - t_j'|)) - 1)
    Without FSE sigma2_b enters both terms additively inside the exponent.
    """
    mu = np.asarray(mu, dtype=np.float64)
    if np.any(mu <= 0):
        raise ValueError("fitted means must be positive")
    return _working_covariance(subject.times, mu, cov, use_fse)


def _cluster_terms(cluster: _Cluster, local_theta: np.ndarray, working: WorkingCovariance,
                   cov: Optional[CovParamEstimate], use_fse: bool):
    """Per-cluster D'V^-1 D and D'V^-1 r at the local parameters."""
    mu = np.exp(cluster.log_m + cluster.design @ local_theta)
    resid = cluster.y - mu
    if working == WorkingCovariance.INDEPENDENCE:
        info = cluster.design.T @ (mu[:, None] * cluster.design)
        score = cluster.design.T @ resid
        return info, score
    deriv = mu[:, None] * cluster.design
    factor = cho_factor(_working_covariance(cluster.times, mu, cov, use_fse), lower=True)
    info = deriv.T @ cho_solve(factor, deriv)
    score = deriv.T @ cho_solve(factor, resid)
    return info, score


class _Normal(NamedTuple):
    info: np.ndarray      # dense A (no FSE) or beta block (FSE)
    score: np.ndarray     # full score vector
    nu_diag: np.ndarray   # FSE: a_i
    nu_beta: np.ndarray   # FSE: coupling rows c_i
    cluster_scores: list  # (owner, local score)


def _accumulate(clusters, layout: _Layout, theta, working, cov) -> _Normal:
    p = layout.p_x
    score = np.zeros(layout.size)
    cluster_scores = []
    if layout.use_fse:
        info = np.zeros((p, p))
        nu_diag = np.zeros(layout.n)
        nu_beta = np.zeros((layout.n, p))
    else:
        info = np.zeros((layout.size, layout.size))
        nu_diag = nu_beta = np.zeros(0)

    for cl in clusters:
        h, u = _cluster_terms(cl, layout.local(theta, cl.owner), working, cov, layout.use_fse)
        idx = layout.indices(cl.owner)
        score[idx] += u
        cluster_scores.append((cl.owner, u))
        if layout.use_fse:
            nu_diag[cl.owner] += h[0, 0]
            nu_beta[cl.owner] += h[0, 1:]
            info += h[1:, 1:]
        else:
            info += h
    return _Normal(info, score, nu_diag, nu_beta, cluster_scores)


def _check_conditioning(matrix: np.ndarray) -> None:
    if matrix.size and (not np.all(np.isfinite(matrix)) or np.linalg.cond(matrix) > _MAX_COND):
        raise np.linalg.LinAlgError("normal equations are not invertible")


def _solve(normal: _Normal, layout: _Layout) -> np.ndarray:
    """Scoring step A^-1 U; under FSE by eliminating each nu_i."""
    if not layout.use_fse:
        _check_conditioning(normal.info)
        return np.linalg.solve(normal.info, normal.score)

    a, c = normal.nu_diag, normal.nu_beta
    if np.any(~np.isfinite(a)) or np.any(a <= 0):
        raise np.linalg.LinAlgError("subject-effect information is not positive")
    u_nu, u_beta = normal.score[:layout.n], normal.score[layout.n:]
    f = c / a[:, None]
    schur = normal.info - c.T @ f
    if layout.p_x:
        _check_conditioning(schur)
        d_beta = np.linalg.solve(schur, u_beta - f.T @ u_nu)
    else:
        d_beta = np.zeros(0)
    d_nu = (u_nu - c @ d_beta) / a
    return np.concatenate([d_nu, d_beta])


def _inverse(normal: _Normal, layout: _Layout) -> np.ndarray:
    """A^-1, assembled blockwise from the Schur complement under FSE."""
    if not layout.use_fse:
        _check_conditioning(normal.info)
        return np.linalg.inv(normal.info)

    a, c = normal.nu_diag, normal.nu_beta
    if np.any(a <= 0):
        raise np.linalg.LinAlgError("subject-effect information is not positive")
    f = c / a[:, None]
    n = layout.n
    inv = np.zeros((layout.size, layout.size))
    inv[:n, :n] = np.diag(1.0 / a)
    if layout.p_x:
        schur = normal.info - c.T @ f
        _check_conditioning(schur)
        schur_inv = np.linalg.inv(schur)
        inv[n:, n:] = schur_inv
        inv[:n, n:] = -f @ schur_inv
        inv[n:, :n] = inv[:n, n:].T
        inv[:n, :n] += f @ schur_inv @ f.T
    return inv


def _quasi_loglik(clusters, layout: _Layout, theta) -> float:
    total = 0.0
    for cl in clusters:
        eta = cl.log_m + cl.design @ layout.local(theta, cl.owner)
        total += float(cl.y @ eta - np.exp(eta).sum())
    return total


def _means_finite(clusters, layout: _Layout, theta) -> bool:
    for cl in clusters:
        eta = cl.log_m + cl.design @ layout.local(theta, cl.owner)
        if not np.all(np.isfinite(eta)) or np.max(eta) > _MAX_ETA:
            return False
    return True


def _score_loop(clusters, layout, theta, working, cov, config: FitConfig):
    """Fisher scoring with step halving. Returns (theta, iterations, na_reason)."""
    independence = working == WorkingCovariance.INDEPENDENCE
    merit = _quasi_loglik(clusters, layout, theta) if independence else None
    for it in range(1, config.max_iter + 1):
        step = _solve(_accumulate(clusters, layout, theta, working, cov), layout)
        scale = 1.0
        for _ in range(config.max_halvings + 1):
            candidate = theta + scale * step
            if _means_finite(clusters, layout, candidate):
                if not independence:
                    break
                cand_merit = _quasi_loglik(clusters, layout, candidate)
                if cand_merit >= merit - 1e-10 * (1.0 + abs(merit)):
                    merit = cand_merit
                    break
            scale /= 2.0
        else:
            return theta, it, "step halving exhausted"
        theta = candidate
        change = float(np.max(np.abs(scale * step))) if step.size else 0.0
        logger.debug(f"scoring iteration {it}: max change {change:.3e}")
        if change < config.tol:
            return theta, it, None
    return theta, config.max_iter, f"no convergence in {config.max_iter} iterations"


def _initial_theta(panel: Panel, layout: _Layout) -> np.ndarray:
    theta = np.zeros(layout.size)
    if layout.use_fse:
        for i, s in enumerate(panel.subjects):
            theta[i] = math.log(s.counts.sum() / s.offsets.sum())
    else:
        total_y = sum(int(s.counts.sum()) for s in panel.subjects)
        total_m = sum(float(s.offsets.sum()) for s in panel.subjects)
        theta[0] = math.log(max(total_y, 0.5) / total_m)
    return theta


def _sandwich(clusters, layout: _Layout, theta, working, cov):
    """(robust, model-based) covariance at theta; A^-1 B A^-1 and A^-1."""
    normal = _accumulate(clusters, layout, theta, working, cov)
    bread = _inverse(normal, layout)
    scores = np.zeros((len(normal.cluster_scores), layout.size))
    for row, (owner, u) in enumerate(normal.cluster_scores):
        scores[row, layout.indices(owner)] += u
    meat = scores.T @ scores
    robust = bread @ meat @ bread
    robust = 0.5 * (robust + robust.T)
    model = 0.5 * (bread + bread.T)
    return robust, model


class Sandwich(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    cov_robust: Optional[np.ndarray] = None
    cov_model: Optional[np.ndarray] = None
    cov_nu_given_nu: Optional[np.ndarray] = None
    na_flag: bool = False
    na_reason: Optional[str] = None


def sandwich_variance(panel: Panel, fit: GeeFit, config: FitConfig) -> Sandwich:
    """
    Liang-Zeger covariance estimates at the fitted coefficients.
    The cluster unit is the subject, or the block when the panel carries
    block ids. Under FSE the nu-block of the model-based inverse is
    returned as the conditional covariance of the estimated subject effects.
    """
    if fit.na_flag:
        return Sandwich(na_flag=True, na_reason=fit.na_reason)
    work = panel.select(fit.subject_ids)
    layout = _Layout(work, config.use_fse)
    clusters = _clusters(work, config.use_fse)
    try:
        robust, model = _sandwich(clusters, layout, np.asarray(fit.coef), config.working_cov, config.cov_params)
    except np.linalg.LinAlgError as exc:
        return Sandwich(na_flag=True, na_reason=f"singular information matrix: {exc}")
    if not (np.all(np.isfinite(robust)) and np.all(np.isfinite(model))):
        return Sandwich(na_flag=True, na_reason="non-finite covariance estimate")
    nu_block = model[:layout.n, :layout.n] if config.use_fse else None
    return Sandwich(cov_robust=robust, cov_model=model, cov_nu_given_nu=nu_block)


def _fitted_means(panel: Panel, layout: _Layout, theta: np.ndarray) -> list[np.ndarray]:
    means = []
    for i, s in enumerate(panel.subjects):
        design = _local_design(s, layout.use_fse)
        means.append(np.exp(np.log(s.offsets) + design @ layout.local(theta, i)))
    return means


def fit_gee(panel: Panel, config: FitConfig) -> GeeFit:
    """
    Solve sum_i D_i' V_i^-1 (Y_i - mu_i) = 0 by Fisher scoring.

    Numerical failures are reported through na_flag / na_reason; subjects
    whose counts are all zero are dropped from FSE fits.
    """
    use_fse = config.use_fse
    if use_fse:
        short = [s.subject_id for s in panel.subjects if s.k < 2]
        if short:
            raise ValueError(f"FSE needs at least 2 trips per subject; subject(s) {short[:5]} have fewer")
        dropped = [s.subject_id for s in panel.subjects if s.counts.sum() == 0]
        if dropped:
            logger.warning(f"dropping {len(dropped)} subject(s) with all-zero counts from the FSE fit: {dropped[:5]}")
    else:
        dropped = []
    kept = [sid for sid in panel.subject_ids if sid not in set(dropped)]
    if not kept:
        return GeeFit.not_available(use_fse, "every subject has all-zero counts", dropped=dropped)

    work = panel.select(kept) if dropped else panel
    layout = _Layout(work, use_fse)
    clusters = _clusters(work, use_fse)
    theta = _initial_theta(work, layout)
    supplied = config.working_cov == WorkingCovariance.SUPPLIED

    try:
        theta, iterations, reason = _score_loop(
            clusters, layout, theta, WorkingCovariance.INDEPENDENCE, None, config
        )
        if reason is None and supplied:
            if config.one_step:
                step = _solve(
                    _accumulate(clusters, layout, theta, WorkingCovariance.SUPPLIED, config.cov_params), layout
                )
                theta = theta + step
                iterations += 1
                if not _means_finite(clusters, layout, theta):
                    reason = "one-step update produced non-finite means"
            else:
                theta, more, reason = _score_loop(
                    clusters, layout, theta, WorkingCovariance.SUPPLIED, config.cov_params, config
                )
                iterations += more
    except np.linalg.LinAlgError as exc:
        return GeeFit.not_available(use_fse, f"numerical failure: {exc}", kept, dropped)
    if reason is not None:
        return GeeFit.not_available(use_fse, reason, kept, dropped, iterations)

    cov_robust = cov_model = cov_nu = None
    try:
        robust, model = _sandwich(clusters, layout, theta, config.working_cov, config.cov_params)
    except np.linalg.LinAlgError as exc:
        return GeeFit.not_available(use_fse, f"singular information matrix: {exc}", kept, dropped, iterations)
    if not (np.all(np.isfinite(robust)) and np.all(np.isfinite(model))):
        return GeeFit.not_available(use_fse, "non-finite covariance estimate", kept, dropped, iterations)
    if config.variance_kind in (VarianceKind.ROBUST, VarianceKind.BOTH):
        cov_robust = robust
    if config.variance_kind in (VarianceKind.MODEL_BASED, VarianceKind.BOTH):
        cov_model = model
    if use_fse:
        cov_nu = model[:layout.n, :layout.n]

    n_fixed = layout.n if use_fse else 1 + layout.p_z
    return GeeFit(
        use_fse=use_fse,
        param_names=layout.names,
        coef=theta,
        beta_hat=theta[layout.beta_slice],
        alpha_hat=None if use_fse else theta[1:n_fixed],
        nu_hat_global=None if use_fse else float(theta[0]),
        nu_hat=theta[:layout.n] if use_fse else None,
        subject_ids=kept,
        dropped_subjects=dropped,
        cov_robust=cov_robust,
        cov_model=cov_model,
        cov_nu_given_nu=cov_nu,
        fitted=_fitted_means(work, layout, theta),
        variance_kind=config.variance_kind,
        converged=True,
        iterations=iterations,
    )


def working_variances(panel: Panel, fit: GeeFit, cov: Optional[CovParamEstimate] = None) -> list[np.ndarray]:
    """Diagonal of the working covariance at the fitted means, per retained subject."""
    variances = []
    for mu in fit.fitted:
        mu = np.asarray(mu)
        if cov is None:
            variances.append(mu.copy())
            continue
        total = cov.sigma2_c + cov.sigma2_e
        if not fit.use_fse:
            total += cov.sigma2_b or 0.0
        variances.append(mu + mu * mu * math.expm1(total))
    return variances
