"""
GOUP data generator: Poisson counts with a normal subject effect, an
Ornstein-Uhlenbeck serial process and normal overdispersion, for constant
or linearly varying decay rate gamma(t).
"""
import logging
import math
from typing import Annotated, Callable, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from data.data_models import Panel, Subject

logger = logging.getLogger(__name__)


class ConstantGamma(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["constant"] = "constant"
    gamma: float = Field(..., gt=0)

    def rate(self, t):
        return np.full_like(np.asarray(t, dtype=np.float64), self.gamma)

    def integral(self, t1, t2):
        """Integrated decay rate between t1 and t2 (elementwise)."""
        return self.gamma * (np.asarray(t2, dtype=np.float64) - np.asarray(t1, dtype=np.float64))


class LinearGamma(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["linear"] = "linear"
    gamma0: float = Field(..., gt=0)
    gamma1: float = Field(..., gt=0)

    def rate(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.gamma0 + (self.gamma1 - self.gamma0) * t

    def integral(self, t1, t2):
        t1 = np.asarray(t1, dtype=np.float64)
        t2 = np.asarray(t2, dtype=np.float64)
        slope = self.gamma1 - self.gamma0
        return self.gamma0 * (t2 - t1) + 0.5 * slope * (t2 * t2 - t1 * t1)


GammaSpec = Annotated[Union[ConstantGamma, LinearGamma], Field(discriminator="kind")]


class GoupParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    nu_star: float = 0.0
    alpha: tuple[float, ...] = (0.0,)
    beta: tuple[float, ...] = (0.0,)
    sigma2_b: float = Field(1.0, ge=0)
    sigma2_c: float = Field(1.0, ge=0)
    sigma2_e: float = Field(1.0, ge=0)
    gamma: GammaSpec = ConstantGamma(gamma=300.0)

    @property
    def sigma2_total(self) -> float:
        return self.sigma2_b + self.sigma2_c + self.sigma2_e


XGenerator = Callable[[np.ndarray, np.random.Generator], np.ndarray]


class DesignSpec(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    n_subjects: int = Field(40, gt=0)
    trips_per_subject: int = Field(1500, gt=0)
    offset_log_mean: float = 1.0
    offset_log_var: float = Field(1.0, ge=0)
    z_prob: tuple[float, ...] = (0.5,)
    # None means X_ij = t_ij
    x_generator: Optional[XGenerator] = None
    target_mean_count: Optional[float] = Field(None, gt=0)

    @field_validator("z_prob")
    @classmethod
    def _check_probabilities(cls, v):
        if any(p < 0 or p > 1 for p in v):
            raise ValueError("Bernoulli probabilities must lie in [0, 1]")
        return v


def sample_ou_path(
    times,
    sigma2_c: float,
    gamma: Union[ConstantGamma, LinearGamma],
    rng: np.random.Generator,
    size: Optional[int] = None,
) -> np.ndarray:
    """
    Draw the latent serial process at sorted times.

    Uses the exact Markov recursion
        c[j+1] = rho[j] * c[j] + sqrt(sigma2_c * (1 - rho[j]^2)) * xi,
    rho[j] = exp(-integral of gamma over [t_j, t_{j+1}]), c[0] ~ N(0, sigma2_c).
    With `size` set, returns `size` independent paths as rows.
    """
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    if np.any(np.diff(times) < 0):
        raise ValueError("times must be sorted in ascending order")
    if sigma2_c < 0:
        raise ValueError("sigma2_c must be nonnegative")

    k = times.shape[0]
    shape = (k,) if size is None else (size, k)
    if sigma2_c == 0 or k == 0:
        return np.zeros(shape)

    rho = np.exp(-gamma.integral(times[:-1], times[1:]))
    innovation_sd = np.sqrt(sigma2_c * (1.0 - rho * rho))
    xi = rng.standard_normal(shape)

    path = np.empty(shape)
    path[..., 0] = math.sqrt(sigma2_c) * xi[..., 0]
    for j in range(1, k):
        path[..., j] = rho[j - 1] * path[..., j - 1] + innovation_sd[j - 1] * xi[..., j]
    return path


def simulate_panel(params: GoupParams, design: DesignSpec, rng: np.random.Generator) -> Panel:
    """Simulate one GOUP panel; trip times are drawn independently per subject."""
    p_z = len(design.z_prob)
    if len(params.alpha) != p_z:
        raise ValueError(f"alpha has {len(params.alpha)} entries but the design has {p_z} subject covariates")

    alpha = np.asarray(params.alpha, dtype=np.float64)
    beta = np.asarray(params.beta, dtype=np.float64)
    z_prob = np.asarray(design.z_prob, dtype=np.float64)
    k = design.trips_per_subject
    log_sd = math.sqrt(design.offset_log_var)

    subjects = []
    p_x = None
    for i in range(design.n_subjects):
        times = np.sort(rng.uniform(0.0, 1.0, size=k))
        log_m = rng.normal(design.offset_log_mean, log_sd, size=k)
        z = (rng.uniform(size=p_z) < z_prob).astype(np.float64)
        if design.x_generator is None:
            x = times.reshape(k, 1)
        else:
            x = np.asarray(design.x_generator(times, rng), dtype=np.float64).reshape(k, -1)
        if x.shape[1] != beta.shape[0]:
            raise ValueError(f"beta has {beta.shape[0]} entries but X has {x.shape[1]} columns")
        p_x = x.shape[1]

        b = rng.normal(0.0, math.sqrt(params.sigma2_b))
        c = sample_ou_path(times, params.sigma2_c, params.gamma, rng)
        e = rng.normal(0.0, math.sqrt(params.sigma2_e), size=k)

        eta = log_m + params.nu_star + z @ alpha + x @ beta + b + c + e
        counts = rng.poisson(np.exp(eta))

        subjects.append(Subject(
            subject_id=str(i + 1),
            subject_covariates=z,
            trip_index=np.arange(1, k + 1),
            times=times,
            offsets=np.exp(log_m),
            counts=counts,
            trip_covariates=x,
        ))

    panel = Panel(
        subjects=subjects,
        z_names=tuple(f"z{j + 1}" for j in range(p_z)),
        x_names=tuple(f"x{j + 1}" for j in range(p_x)),
    )
    logger.debug(f"simulated panel n={panel.n} k={k} total count={sum(int(s.counts.sum()) for s in subjects)}")
    return panel


def calibrate_nu_star(design: DesignSpec, params: GoupParams) -> float:
    """
    nu_star giving the requested marginal mean count, using the log-normal
    moment identity with X = trip time uniform on [0, 1].
    """
    target = design.target_mean_count
    if target is None or target <= 0:
        raise ValueError("target_mean_count must be set and positive")
    if design.x_generator is not None:
        raise ValueError("closed-form calibration requires X = trip time")
    if len(params.beta) != 1:
        raise ValueError("closed-form calibration requires a single trip-level coefficient")
    if len(params.alpha) != len(design.z_prob):
        raise ValueError("alpha and z_prob must have the same length")

    log_mean_offset = design.offset_log_mean + design.offset_log_var / 2.0
    log_mean_z = sum(
        math.log(1.0 - p + p * math.exp(a)) for a, p in zip(params.alpha, design.z_prob)
    )
    beta = params.beta[0]
    log_mean_t = math.log(math.expm1(beta) / beta) if beta != 0 else 0.0

    return math.log(target) - log_mean_offset - log_mean_z - log_mean_t - params.sigma2_total / 2.0


def calibrated(params: GoupParams, design: DesignSpec) -> GoupParams:
    return params.model_copy(update={"nu_star": calibrate_nu_star(design, params)})
