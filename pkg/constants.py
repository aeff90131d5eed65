import logging
import os
from dotenv import load_dotenv

logger = logging.getLogger(__name__)

# Load environment variables - prioritize .env.local for local experiments
# If .env.local exists, use it; otherwise fall back to .env
if os.path.exists('.env.local'):
    load_dotenv('.env.local')
    logger.debug("Using local overrides (.env.local)")
else:
    load_dotenv()


def _float(name: str, default: float) -> float:
    return float(os.environ.get(name, str(default)))


def _int(name: str, default: int) -> int:
    return int(os.environ.get(name, str(default)))


# GEE fitting (Fisher scoring)
GEE_TOL: float = _float('GEE_TOL', 1e-8)
GEE_MAX_ITER: int = _int('GEE_MAX_ITER', 50)
GEE_MAX_HALVINGS: int = _int('GEE_MAX_HALVINGS', 5)

# Covariance-parameter estimation
COV_N_BINS: int = _int('COV_N_BINS', 20)
COV_GAMMA_MIN: float = _float('COV_GAMMA_MIN', 1e-2)
COV_GAMMA_MAX: float = _float('COV_GAMMA_MAX', 1e5)
COV_BIN_EPS: float = _float('COV_BIN_EPS', 1e-6)
NLS_MAX_ITER: int = _int('NLS_MAX_ITER', 100)
NLS_REL_TOL: float = _float('NLS_REL_TOL', 1e-10)

# Second-stage subject-level regression
IRLS_MAX_ITER: int = _int('IRLS_MAX_ITER', 10)
IRLS_TOL: float = _float('IRLS_TOL', 1e-8)
IRLS_SINGULAR_RTOL: float = _float('IRLS_SINGULAR_RTOL', 1e-12)

# Within-cluster resampling
WCR_BLOCK: int = _int('WCR_BLOCK', 100)
WCR_SEP: int = _int('WCR_SEP', 50)
WCR_REPS: int = _int('WCR_REPS', 50)

# Serial-correlation diagnostic
DIAG_N_BINS: int = _int('DIAG_N_BINS', 100)

# Scenario harness
DESK_SCALE: float = _float('DESK_SCALE', 0.2)
WALD_Z: float = _float('WALD_Z', 1.96)
DEFAULT_THREADS: int = _int('DEFAULT_THREADS', os.cpu_count() or 1)

LOG_LEVEL: str = os.environ.get('LOG_LEVEL', 'WARNING')
