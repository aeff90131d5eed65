"""
Within-cluster resampling (WCR).

Each repetition draws a subsample of trips from every subject, fits it with
gee_core, and the L fits are combined as

    theta_wcr = mean_l theta_l
    Sigma_wcr = mean_l Sigma_l - sample covariance of theta_l

Subsamples with NA fits are counted and excluded before combining.
"""
import itertools
import logging
import math
from multiprocessing import Pool
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from analysis.gee_core import FitConfig, fit_gee
from analysis.models import CovParamEstimate, VarianceKind
from constants import WCR_BLOCK, WCR_REPS, WCR_SEP
from data.data_models import Panel, Subject
from utils import stream_rng

logger = logging.getLogger(__name__)


class SingleTrip(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["single"] = "single"

    @property
    def min_trips(self) -> int:
        return 1

    def draw(self, subject: Subject, rng: np.random.Generator) -> Subject:
        return subject.take([rng.integers(subject.k)])


class Srs(BaseModel):
    """Simple random sample of R trips per subject, without replacement."""
    model_config = ConfigDict(frozen=True)

    kind: Literal["srs"] = "srs"
    R: int = Field(..., ge=1)

    @property
    def min_trips(self) -> int:
        return self.R

    def draw(self, subject: Subject, rng: np.random.Generator) -> Subject:
        return subject.take(rng.choice(subject.k, size=self.R, replace=False))


class SystematicSeparated(BaseModel):
    """Random start among the first S+1 trips, then every (S+1)st trip."""
    model_config = ConfigDict(frozen=True)

    kind: Literal["systematic"] = "systematic"
    S: int = Field(..., ge=0)

    @property
    def min_trips(self) -> int:
        return 1

    def draw(self, subject: Subject, rng: np.random.Generator) -> Subject:
        start = rng.integers(min(self.S + 1, subject.k))
        return subject.take(np.arange(start, subject.k, self.S + 1))


class SeparatedBlocks(BaseModel):
    """
    Blocks of B consecutive trips separated by S skipped trips, after a
    random shift in {0, ..., B+S-1}, restricted to the shifts that keep at
    least one block for the subject at hand. Trip j (0-based) is taken when
    (j + shift) mod (B+S) < B and belongs to block (j + shift) // (B+S);
    blocks left with fewer than 2 trips are discarded.
    """
    model_config = ConfigDict(frozen=True)

    kind: Literal["sb"] = "sb"
    B: int = Field(WCR_BLOCK, ge=2)
    S: int = Field(WCR_SEP, ge=0)

    @property
    def min_trips(self) -> int:
        return self.B + self.S

    def positions(self, k: int, shift: int) -> tuple[np.ndarray, np.ndarray]:
        period = self.B + self.S
        j = np.arange(k) + shift
        taken = np.flatnonzero(j % period < self.B)
        block = j[taken] // period
        ids, sizes = np.unique(block, return_counts=True)
        keep = np.isin(block, ids[sizes >= 2])
        return taken[keep], block[keep]

    def shifts(self, k: int) -> list[int]:
        """Shifts that leave at least one block of 2 or more trips."""
        return [s for s in range(self.B + self.S) if self.positions(k, s)[0].size]

    def draw(self, subject: Subject, rng: np.random.Generator) -> Subject:
        shifts = self.shifts(subject.k)
        if not shifts:
            raise ValueError(f"subject {subject.subject_id} has no block of 2 or more trips")
        positions, block = self.positions(subject.k, int(rng.choice(shifts)))
        return subject.take(positions, block_ids=block)


SamplingScheme = Annotated[
    Union[SingleTrip, Srs, SystematicSeparated, SeparatedBlocks], Field(discriminator="kind")
]


def draw_subsample(panel: Panel, scheme: SamplingScheme, rng: np.random.Generator) -> Panel:
    """One subsample per subject, in panel order; SeparatedBlocks annotates block ids."""
    shortest = min(s.k for s in panel.subjects)
    if shortest < scheme.min_trips:
        raise ValueError(
            f"{scheme.kind} sampling needs at least {scheme.min_trips} trips per subject, shortest has {shortest}"
        )
    return panel.with_subjects([scheme.draw(s, rng) for s in panel.subjects])


class SubsampleFit(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    theta: Optional[np.ndarray] = None
    cov: Optional[np.ndarray] = None
    na_flag: bool = False
    na_reason: Optional[str] = None


class WcrResult(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    theta_wcr: Optional[np.ndarray] = None
    cov_wcr: Optional[np.ndarray] = None
    theta_names: list[str] = Field(default_factory=list)
    L_requested: int
    L_used: int
    per_subsample: list[SubsampleFit] = Field(default_factory=list)
    diag_negative: bool = False
    na_flag: bool = False
    na_reason: Optional[str] = None

    def standard_errors(self) -> Optional[np.ndarray]:
        """NaN where the combined variance is negative."""
        if self.cov_wcr is None:
            return None
        diag = np.diag(self.cov_wcr)
        return np.where(diag >= 0, np.sqrt(np.abs(diag)), np.nan)

    def to_report(self) -> dict:
        return {
            "theta_names": self.theta_names,
            "theta_wcr": self.theta_wcr,
            "se_wcr": self.standard_errors(),
            "cov_wcr": self.cov_wcr,
            "L_requested": self.L_requested,
            "L_used": self.L_used,
            "diag_negative": self.diag_negative,
            "na_flag": self.na_flag,
            "na_reason": self.na_reason,
        }


def combine_estimates(thetas, covs) -> tuple[np.ndarray, np.ndarray]:
    """Mean estimate and mean variance minus between-subsample covariance (0 for one subsample)."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    covs = np.asarray(covs, dtype=np.float64)
    theta = thetas.mean(axis=0)
    within = covs.mean(axis=0)
    if thetas.shape[0] < 2:
        return theta, within
    between = np.atleast_2d(np.cov(thetas, rowvar=False, ddof=1))
    return theta, within - between


def _designated_kind(config: FitConfig) -> VarianceKind:
    return VarianceKind.ROBUST if config.variance_kind == VarianceKind.BOTH else config.variance_kind


def _fit_subsample(panel: Panel, scheme, config: FitConfig, seed: int, rep: int):
    sub = draw_subsample(panel, scheme, stream_rng(seed, rep))
    fit = fit_gee(sub, config)
    if fit.na_flag:
        return SubsampleFit(na_flag=True, na_reason=fit.na_reason), []
    cov = fit.theta_cov(_designated_kind(config))
    if cov is None or not np.all(np.isfinite(cov)):
        return SubsampleFit(na_flag=True, na_reason="variance not available"), []
    return SubsampleFit(theta=fit.theta(), cov=cov), fit.theta_names


def _check_scheme(scheme, config: FitConfig) -> None:
    if not config.use_fse:
        return
    if isinstance(scheme, SingleTrip) or (isinstance(scheme, Srs) and scheme.R < 2):
        raise ValueError("FSE needs at least 2 trips per subject in every subsample")


def run_wcr(
    panel: Panel,
    scheme: SamplingScheme,
    L: int = WCR_REPS,
    fit_config: Optional[FitConfig] = None,
    seed: int = 0,
    threads: int = 1,
) -> WcrResult:
    """
    Draw L subsamples on independent streams derived from (seed, l), fit
    each, and combine the non-NA fits. Results do not depend on `threads`.
    """
    if L < 1:
        raise ValueError("L must be at least 1")
    config = fit_config or FitConfig(use_fse=isinstance(scheme, SeparatedBlocks))
    _check_scheme(scheme, config)

    args = [(panel, scheme, config, seed, rep) for rep in range(L)]
    if threads > 1 and L > 1:
        logger.info(f"running {L} {scheme.kind} subsample fits on {threads} workers")
        with Pool(processes=min(threads, L)) as pool:
            outcomes = pool.starmap(_fit_subsample, args)
    else:
        outcomes = list(itertools.starmap(_fit_subsample, args))

    fits = [fit for fit, _ in outcomes]
    names = next((nm for _, nm in outcomes if nm), [])
    good = [f for f in fits if not f.na_flag]
    if len(good) < L:
        logger.info(f"{L - len(good)} of {L} subsample fits were NA and are excluded")
    if not good:
        return WcrResult(
            L_requested=L, L_used=0, per_subsample=fits, na_flag=True,
            na_reason="every subsample fit was NA",
        )

    theta, cov = combine_estimates([f.theta for f in good], [f.cov for f in good])
    diag_negative = bool(np.any(np.diag(cov) < 0))
    if diag_negative:
        logger.warning("combined WCR variance has a negative diagonal entry")
    return WcrResult(
        theta_wcr=theta, cov_wcr=cov, theta_names=names, L_requested=L, L_used=len(good),
        per_subsample=fits, diag_negative=diag_negative,
    )


def max_between_block_correlation(
    cov: CovParamEstimate,
    sep: int,
    mean_count: float,
    trips_per_unit_time: float,
) -> float:
    """
    Largest correlation, conditional on the subject effect, between two
    trips in different blocks: the pair S+1 trip spacings apart.
    """
    if mean_count <= 0 or trips_per_unit_time <= 0:
        raise ValueError("mean_count and trips_per_unit_time must be positive")
    gap = (sep + 1) / trips_per_unit_time
    mu = mean_count
    covariance = mu * mu * math.expm1(cov.sigma2_c * math.exp(-cov.gamma * gap))
    variance = mu + mu * mu * math.expm1(cov.sigma2_c + cov.sigma2_e)
    return covariance / variance
