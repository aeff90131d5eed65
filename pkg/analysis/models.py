import enum
import math
from typing import Optional

from pydantic import BaseModel, Field, model_validator


class CovMethod(str, enum.Enum):
    FSE_LS = "fse-ls"
    FSE_IRLS = "fse-irls"
    NO_FSE = "no-fse"


class WorkingCovariance(str, enum.Enum):
    INDEPENDENCE = "independence"
    SUPPLIED = "goup"


class VarianceKind(str, enum.Enum):
    ROBUST = "robust"
    MODEL_BASED = "model"
    BOTH = "both"


class CovParamEstimate(BaseModel):
    """
    Estimated covariance parameters (sigma2_b, sigma2_c, sigma2_e, gamma).

    When converged is False the values are the data-driven initial values;
    they are still finite unless na_flag is set.
    """
    sigma2_b: Optional[float] = Field(None, ge=0)
    sigma2_c: float = Field(..., ge=0)
    sigma2_e: float = Field(..., ge=0)
    gamma: float = Field(..., gt=0)
    method: CovMethod = CovMethod.FSE_LS
    converged: bool = True
    na_flag: bool = False
    na_reason: Optional[str] = None

    @model_validator(mode="after")
    def _check_finite(self):
        if not self.na_flag:
            values = [self.sigma2_c, self.sigma2_e, self.gamma]
            if self.sigma2_b is not None:
                values.append(self.sigma2_b)
            if not all(math.isfinite(v) for v in values):
                raise ValueError("covariance parameters must be finite unless na_flag is set")
        return self

    @classmethod
    def not_available(cls, method: CovMethod, reason: str) -> "CovParamEstimate":
        return cls(
            sigma2_b=None, sigma2_c=0.0, sigma2_e=0.0, gamma=1.0,
            method=method, converged=False, na_flag=True, na_reason=reason,
        )
