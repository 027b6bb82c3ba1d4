"""
Substantive analysis of a completed dataset and Rubin's-rules pooling.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm, t as student_t

from .errors import RdsimError
from .glm import DesignMatrix, fit_logistic
from .impute import CompletedDataset
from .scenario import N_VISITS

CI_LEVEL = 0.95
TREATMENT_TERM = "arm"


class PoolingError(RdsimError, ValueError):
    pass


@dataclass(frozen=True)
class PooledEstimate:
    point: float
    within_var: float
    between_var: float
    total_var: float
    se: float
    df: float  # math.inf when the imputations agree exactly
    ci_low: float
    ci_high: float
    p_value: float
    m_used: int

    @property
    def halfwidth(self) -> float:
        return 0.5 * (self.ci_high - self.ci_low)

    def covers(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high

    @property
    def significant(self) -> bool:
        """Directional significance favouring Active at one-sided 2.5%."""
        return self.ci_low > 0.0

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def cell_design(arm: np.ndarray, y0: np.ndarray, y_end: np.ndarray) -> DesignMatrix:
    """
    Collapse patients into the 8 (arm, Y_0, Y_end) cells as a weighted design
    with columns (intercept, arm, y0). Empty cells are left out.
    """
    if np.any(np.asarray(y_end) < 0) or np.any(np.asarray(y0) < 0):
        raise PoolingError("analysis needs complete baseline and final outcomes")
    return design_from_counts(cell_counts(arm, y0, y_end))


def cell_counts(arm: np.ndarray, y0: np.ndarray, y_end: np.ndarray) -> np.ndarray:
    """Counts of the 8 cells indexed by arm * 4 + y0 * 2 + y_end."""
    code = np.asarray(arm, dtype=np.int64) * 4 + np.asarray(y0, dtype=np.int64) * 2
    return np.bincount(code + np.asarray(y_end, dtype=np.int64), minlength=8)


def design_from_counts(counts: np.ndarray) -> DesignMatrix:
    counts = np.asarray(counts, dtype=float)
    if counts.shape != (8,):
        raise PoolingError(f"expected 8 cell counts, got shape {counts.shape}")
    cells = np.flatnonzero(counts > 0)
    X = np.column_stack([np.ones(cells.size), (cells >> 2) & 1, (cells >> 1) & 1]).astype(float)
    return DesignMatrix.build(
        X,
        (cells & 1).astype(float),
        w=counts[cells],
        names=("intercept", TREATMENT_TERM, "y0"),
    )


def analyze(cd: CompletedDataset) -> Tuple[float, float]:
    """
    Fit logit P(Y_3 = 1) = b0 + b1 * [arm = Active] + b2 * Y_0 over both arms.

    Returns:
        (b1_hat, Var(b1_hat))

    Raises:
        GlmError: the fit fails (the caller excludes the replicate)
    """
    fit = fit_logistic(cell_design(cd.data.arm, cd.y[:, 0], cd.y[:, N_VISITS]))
    return fit.coef_of(TREATMENT_TERM), fit.var_of(TREATMENT_TERM)


def rubin_pool(
    estimates: Sequence[Tuple[float, float]],
    M: Optional[int] = None,
) -> PooledEstimate:
    """
    Combine M (point, variance) pairs by Rubin's rules.

    T = W + (1 + 1/M) B; df = (M - 1)(1 + W / ((1 + 1/M) B))^2, infinite
    when B = 0, in which case the normal reference is used.

    Raises:
        PoolingError: fewer than two pairs, non-finite input, W <= 0
    """
    arr = np.asarray(list(estimates), dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise PoolingError("estimates must be (point, variance) pairs")
    m = arr.shape[0] if M is None else int(M)
    if m != arr.shape[0]:
        raise PoolingError(f"M={m} but {arr.shape[0]} estimates given")
    if m < 2:
        raise PoolingError(f"Rubin's rules need M >= 2, got {m}")
    if not np.all(np.isfinite(arr)):
        raise PoolingError("non-finite estimate or variance")
    if np.any(arr[:, 1] < 0):
        raise PoolingError("negative variance")

    points, variances = arr[:, 0], arr[:, 1]
    q = float(points.mean())
    W = float(variances.mean())
    if W <= 0:
        raise PoolingError("within-imputation variance must be positive")
    B = float(points.var(ddof=1))
    inflated_b = (1.0 + 1.0 / m) * B
    T = W + inflated_b
    se = math.sqrt(T)

    if inflated_b > 0:
        df = (m - 1) * (1.0 + W / inflated_b) ** 2
        crit = float(student_t.ppf(0.5 + CI_LEVEL / 2, df))
        p = float(2.0 * student_t.sf(abs(q) / se, df))
    else:
        df = math.inf
        crit = float(norm.ppf(0.5 + CI_LEVEL / 2))
        p = float(2.0 * norm.sf(abs(q) / se))

    return PooledEstimate(
        point=q,
        within_var=W,
        between_var=B,
        total_var=T,
        se=se,
        df=df,
        ci_low=q - crit * se,
        ci_high=q + crit * se,
        p_value=p,
        m_used=m,
    )


def single_estimate(point: float, variance: float) -> PooledEstimate:
    """Wald inference for the complete-data (FULL) analysis, M = 1."""
    if not (math.isfinite(point) and math.isfinite(variance)) or variance <= 0:
        raise PoolingError("complete-data estimate must have finite positive variance")
    se = math.sqrt(variance)
    crit = float(norm.ppf(0.5 + CI_LEVEL / 2))
    return PooledEstimate(
        point=float(point),
        within_var=float(variance),
        between_var=0.0,
        total_var=float(variance),
        se=se,
        df=math.inf,
        ci_low=point - crit * se,
        ci_high=point + crit * se,
        p_value=float(2.0 * norm.sf(abs(point) / se)),
        m_used=1,
    )


def pool_completed(completed: Iterable[CompletedDataset]) -> PooledEstimate:
    """Analyse every completed dataset and pool; one dataset gets Wald inference."""
    results = [analyze(cd) for cd in completed]
    if len(results) == 1:
        return single_estimate(*results[0])
    return rubin_pool(results)
