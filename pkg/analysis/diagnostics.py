import logging

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from constants import DIAG_N_BINS
from data.data_models import Panel

logger = logging.getLogger(__name__)


class BinStat(BaseModel):
    model_config = ConfigDict(frozen=True)

    median_gap: float
    mean_product: float
    n_pairs: int = Field(..., ge=1)


class BinnedCorrelation(BaseModel):
    model_config = ConfigDict(frozen=True)

    bins: list[BinStat]

    @property
    def n_pairs(self) -> int:
        return sum(b.n_pairs for b in self.bins)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [b.model_dump() for b in self.bins],
            columns=["median_gap", "mean_product", "n_pairs"],
        )


def serial_diagnostic(panel: Panel, fitted, variances, n_bins: int = DIAG_N_BINS) -> BinnedCorrelation:
    """
    Mean product of standardized residuals (Y - mu) / sqrt(v) for consecutive
    trips, over equal-count bins of gap time.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be at least 1")
    if len(fitted) != panel.n or len(variances) != panel.n:
        raise ValueError("fitted means and variances must be given for every subject")

    gaps, products = [], []
    for s, mu, v in zip(panel.subjects, fitted, variances):
        mu = np.asarray(mu, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if mu.shape[0] != s.k or v.shape[0] != s.k:
            raise ValueError(f"fitted values for subject {s.subject_id} do not match its {s.k} trips")
        z = (s.counts - mu) / np.sqrt(v)
        gaps.append(np.diff(s.times))
        products.append(z[:-1] * z[1:])
    gap = np.concatenate(gaps)
    product = np.concatenate(products)
    if gap.size == 0:
        raise ValueError("no consecutive trip pairs in the panel")

    if gap.size < n_bins:
        logger.warning(f"only {gap.size} pairs for {n_bins} bins; using one bin per pair")
        n_bins = int(gap.size)

    # ties on gap broken by product so the binning does not depend on subject order
    order = np.lexsort((product, gap))
    bins = [
        BinStat(
            median_gap=float(np.median(gap[idx])),
            mean_product=float(np.mean(product[idx])),
            n_pairs=int(idx.size),
        )
        for idx in np.array_split(order, n_bins)
    ]
    return BinnedCorrelation(bins=bins)
