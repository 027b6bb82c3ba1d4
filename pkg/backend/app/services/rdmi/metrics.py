"""
Per-replicate results, the oracle true estimand and the performance
measures (bias, coverage, CI halfwidth, power / false positives, ModSE)
with their Monte Carlo standard errors.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from shared.config import settings
from shared.utils import get_logger

from .dgm import policy_outcomes, simulate_arm
from .glm import fit_logistic
from .impute import ModelKind
from .pool import TREATMENT_TERM, PooledEstimate, cell_counts, design_from_counts
from .scenario import N_VISITS, Arm, ScenarioSpec
from .streams import StreamFactory

logger = get_logger("rdmi-metrics")

STATUS_FITTED = "fitted"
STATUS_EXCLUDED = "excluded"


@dataclass(frozen=True)
class RepResult:
    scenario: str
    replicate: int
    model: ModelKind
    estimate: Optional[PooledEstimate] = None
    reason: Optional[str] = None

    def __post_init__(self) -> None:
        if (self.estimate is None) == (self.reason is None):
            raise ValueError("a replicate result carries either an estimate or an exclusion reason")

    @property
    def fitted(self) -> bool:
        return self.estimate is not None

    @property
    def status(self) -> str:
        return STATUS_FITTED if self.fitted else STATUS_EXCLUDED

    @property
    def significant(self) -> bool:
        return self.estimate is not None and self.estimate.significant

    @classmethod
    def excluded(cls, scenario: str, replicate: int, model: ModelKind, reason: str) -> "RepResult":
        return cls(scenario=scenario, replicate=replicate, model=model, reason=reason or "unspecified")


# Column order of replicates.csv
REPLICATE_COLUMNS = (
    "scenario", "replicate", "model", "status", "reason",
    "point", "se", "df", "ci_low", "ci_high", "p_value",
    "within_var", "between_var", "m_used", "significant",
)


def result_to_row(r: RepResult) -> Dict[str, Any]:
    row: Dict[str, Any] = {
        "scenario": r.scenario,
        "replicate": r.replicate,
        "model": r.model.value,
        "status": r.status,
        "reason": r.reason or "",
    }
    e = r.estimate
    for col in ("point", "se", "df", "ci_low", "ci_high", "p_value", "within_var", "between_var"):
        row[col] = getattr(e, col) if e is not None else math.nan
    row["m_used"] = e.m_used if e is not None else 0
    row["significant"] = int(r.significant)
    return row


def result_from_row(row: Dict[str, Any]) -> RepResult:
    """Inverse of result_to_row() for a row read back from replicates.csv."""
    model = ModelKind(str(row["model"]))
    if row["status"] != STATUS_FITTED:
        reason = row.get("reason")
        if not isinstance(reason, str) or not reason:
            reason = "unspecified"
        return RepResult.excluded(str(row["scenario"]), int(row["replicate"]), model, reason)
    within = float(row["within_var"])
    between = float(row["between_var"])
    m_used = int(row["m_used"])
    total = within + (1.0 + 1.0 / m_used) * between if m_used > 1 else within
    est = PooledEstimate(
        point=float(row["point"]),
        within_var=within,
        between_var=between,
        total_var=total,
        se=float(row["se"]),
        df=float(row["df"]),
        ci_low=float(row["ci_low"]),
        ci_high=float(row["ci_high"]),
        p_value=float(row["p_value"]),
        m_used=m_used,
    )
    return RepResult(scenario=str(row["scenario"]), replicate=int(row["replicate"]), model=model, estimate=est)


# ---------------------------------------------------------------------------
# True estimand
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrueEffect:
    value: float
    mcse: float
    patients_per_arm: int
    seed: int
    chunk: Optional[int] = None


_TRUTH_CACHE: Dict[Tuple[int, int, int, int], TrueEffect] = {}


def true_log_or(
    spec: ScenarioSpec,
    patients_per_arm: Optional[int] = None,
    chunk: Optional[int] = None,
    seed: Optional[int] = None,
) -> TrueEffect:
    """
    Conditional log odds ratio of Y_3 on arm given Y_0 under the
    treatment-policy outcome, estimated on one oracle mega-trial without
    withdrawals.

    The trial is generated in chunks per arm; each chunk applies the
    scenario's discontinuation schedule to its own patients. Only the eight
    (arm, Y_0, Y_3) cell counts are kept, and the substantive model is
    fitted once on the accumulated counts. The result is cached per
    (scenario data-generating key, size, chunk, seed).
    """
    patients = int(patients_per_arm or settings.ORACLE_PATIENTS_PER_ARM)
    chunk = int(chunk or settings.ORACLE_CHUNK)
    seed = int(settings.ORACLE_SEED if seed is None else seed)
    if patients <= 0 or chunk <= 0:
        raise ValueError("oracle size and chunk must be positive")
    key = (spec.stream_key(), patients, chunk, seed)
    cached = _TRUTH_CACHE.get(key)
    if cached is not None:
        return cached

    logger.info(f"oracle start scenario={spec.name} patients_per_arm={patients} chunk={chunk} seed={seed}")
    counts = np.zeros(8, dtype=np.int64)
    n_chunks = math.ceil(patients / chunk)
    for c in range(n_chunks):
        size = min(chunk, patients - c * chunk)
        streams = StreamFactory(seed, spec.stream_key(), "oracle", c)
        for arm in (Arm.ACTIVE, Arm.CONTROL):
            y_on, y_off, ie_time, _ = simulate_arm(spec, arm, streams, n=size, withdrawal_rate=0.0)
            y = policy_outcomes(y_on, y_off, ie_time)
            counts += cell_counts(np.full(size, arm.code), y[:, 0], y[:, N_VISITS])

    fit = fit_logistic(design_from_counts(counts))
    effect = TrueEffect(
        value=fit.coef_of(TREATMENT_TERM),
        mcse=math.sqrt(fit.var_of(TREATMENT_TERM)),
        patients_per_arm=patients,
        seed=seed,
        chunk=chunk,
    )
    _TRUTH_CACHE[key] = effect
    logger.info(f"oracle done scenario={spec.name} theta_true={effect.value:.6f} mcse={effect.mcse:.2e}")
    return effect


def clear_truth_cache() -> None:
    _TRUTH_CACHE.clear()


def prime_truth_cache(spec: ScenarioSpec, effect: TrueEffect) -> None:
    """Register a frozen oracle result so true_log_or() returns it for the same settings."""
    if effect.chunk is None:
        raise ValueError("a frozen oracle result must record its chunk size")
    _TRUTH_CACHE[(spec.stream_key(), effect.patients_per_arm, effect.chunk, effect.seed)] = effect
    logger.debug(f"oracle primed scenario={spec.name} theta_true={effect.value:.6f}")


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SummaryRow:
    scenario: str
    model: str
    null: bool
    n_sims: int
    n_fitted: int
    fitted_pct: float
    estimable: bool
    theta_true: float
    mean_estimate: Optional[float] = None
    bias: Optional[float] = None
    bias_mcse: Optional[float] = None
    bias_pct: Optional[float] = None
    bias_pct_mcse: Optional[float] = None
    empirical_se: Optional[float] = None
    empirical_se_mcse: Optional[float] = None
    mean_model_se: Optional[float] = None
    modse_rel_err_pct: Optional[float] = None
    modse_rel_err_mcse: Optional[float] = None
    coverage_pct: Optional[float] = None
    coverage_mcse: Optional[float] = None
    coverage_change_pct: Optional[float] = None
    coverage_change_pp: Optional[float] = None
    mean_halfwidth: Optional[float] = None
    halfwidth_change_pct: Optional[float] = None
    power_pct: Optional[float] = None
    false_positive_pct: Optional[float] = None
    rejection_mcse: Optional[float] = None
    reason: Optional[str] = None

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


SUMMARY_COLUMNS = tuple(SummaryRow.__dataclass_fields__)


def proportion_mcse(p: float, n: int) -> float:
    """Binomial Monte Carlo SE of a proportion estimated from n replicates."""
    if n <= 0:
        return math.nan
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


def modse_relative_error(se: np.ndarray, estimates: np.ndarray) -> Tuple[float, float]:
    """
    100 * (mean model SE / empirical SE - 1) and its Monte Carlo SE.

    The MCSE follows the usual simulation-study approximation
    100 * R * sqrt(Var(SE^2) / (4 n ModSE^4) + 1 / (2 (n - 1))) with
    ModSE^2 the mean model variance.
    """
    n = estimates.size
    if n < 2:
        return math.nan, math.nan
    emp = float(np.std(estimates, ddof=1))
    if emp <= 0:
        return math.nan, math.nan
    ratio = float(np.mean(se)) / emp
    var2 = se ** 2
    modse_sq = float(np.mean(var2))
    spread = float(np.var(var2, ddof=1)) / (4.0 * n * modse_sq ** 2) if modse_sq > 0 else math.nan
    mcse = 100.0 * ratio * math.sqrt(spread + 1.0 / (2.0 * (n - 1)))
    return 100.0 * (ratio - 1.0), mcse


def _theta(theta_true: Union[TrueEffect, float]) -> float:
    return theta_true.value if isinstance(theta_true, TrueEffect) else float(theta_true)


def _fitted(results: Sequence[RepResult]) -> List[PooledEstimate]:
    ordered = sorted(results, key=lambda r: r.replicate)
    return [r.estimate for r in ordered if r.estimate is not None]


def _pct_change(value: float, reference: float) -> Optional[float]:
    if reference == 0 or not math.isfinite(reference):
        return None
    return 100.0 * (value / reference - 1.0)


def summarize(
    results: Sequence[RepResult],
    full_results: Sequence[RepResult],
    theta_true: Union[TrueEffect, float],
    spec: ScenarioSpec,
) -> SummaryRow:
    """
    Fold the replicate results of one scenario x model into a SummaryRow.

    Excluded replicates drop out of every denominator. Halfwidth and
    coverage changes are relative to the FULL results of the same scenario.
    A cell where every replicate was excluded is returned as non-estimable.
    """
    if not results:
        raise ValueError("no replicate results to summarize")
    models = {r.model for r in results}
    if len(models) != 1:
        raise ValueError(f"results mix models {sorted(m.value for m in models)}")
    model = next(iter(models))
    theta = _theta(theta_true)
    n_sims = len(results)
    fitted = _fitted(results)
    n = len(fitted)
    base = dict(
        scenario=spec.name,
        model=model.value,
        null=spec.null,
        n_sims=n_sims,
        n_fitted=n,
        fitted_pct=100.0 * n / n_sims,
        theta_true=theta,
    )
    if n == 0:
        reasons = sorted({r.reason for r in results if r.reason})
        return SummaryRow(estimable=False, reason="; ".join(reasons[:3]) or "no fitted replicates", **base)

    est = np.array([e.point for e in fitted])
    se = np.array([e.se for e in fitted])
    hw = np.array([e.halfwidth for e in fitted])
    cover = np.array([e.covers(theta) for e in fitted], dtype=float)
    reject = np.array([e.significant for e in fitted], dtype=float)

    mean_est = float(est.mean())
    emp_se = float(est.std(ddof=1)) if n > 1 else math.nan
    bias = mean_est - theta
    bias_mcse = emp_se / math.sqrt(n) if n > 1 else math.nan
    if spec.null or theta == 0:
        bias_pct = bias_pct_mcse = None
    else:
        bias_pct = 100.0 * bias / theta
        bias_pct_mcse = 100.0 * bias_mcse / abs(theta)

    coverage = float(cover.mean())
    rejection = float(reject.mean())
    mean_hw = float(hw.mean())

    full = _fitted(full_results)
    coverage_change_pct = coverage_change_pp = halfwidth_change_pct = None
    if full:
        full_cov = float(np.mean([e.covers(theta) for e in full]))
        full_hw = float(np.mean([e.halfwidth for e in full]))
        coverage_change_pct = _pct_change(coverage, full_cov)
        coverage_change_pp = 100.0 * (coverage - full_cov)
        halfwidth_change_pct = _pct_change(mean_hw, full_hw)

    modse_err, modse_mcse = modse_relative_error(se, est)
    return SummaryRow(
        estimable=True,
        mean_estimate=mean_est,
        bias=bias,
        bias_mcse=bias_mcse,
        bias_pct=bias_pct,
        bias_pct_mcse=bias_pct_mcse,
        empirical_se=emp_se,
        empirical_se_mcse=emp_se / math.sqrt(2.0 * (n - 1)) if n > 1 else math.nan,
        mean_model_se=float(se.mean()),
        modse_rel_err_pct=modse_err,
        modse_rel_err_mcse=modse_mcse,
        coverage_pct=100.0 * coverage,
        coverage_mcse=100.0 * proportion_mcse(coverage, n),
        coverage_change_pct=coverage_change_pct,
        coverage_change_pp=coverage_change_pp,
        mean_halfwidth=mean_hw,
        halfwidth_change_pct=halfwidth_change_pct,
        power_pct=None if spec.null else 100.0 * rejection,
        false_positive_pct=100.0 * rejection if spec.null else None,
        rejection_mcse=100.0 * proportion_mcse(rejection, n),
        **base,
    )
