import json
import math
from pathlib import Path

import numpy as np
import pytest

from app.services.rdmi.impute import ModelKind
from app.services.rdmi.metrics import (
    SUMMARY_COLUMNS,
    RepResult,
    TrueEffect,
    clear_truth_cache,
    modse_relative_error,
    prime_truth_cache,
    proportion_mcse,
    result_from_row,
    result_to_row,
    summarize,
    true_log_or,
)
from app.services.rdmi.pool import rubin_pool, single_estimate
from app.services.rdmi.scenario import preset
from shared.config import settings

FIXTURES = Path(__file__).resolve().parent / "fixtures"
ORACLE = dict(patients_per_arm=200_000, chunk=50_000, seed=7)


def _results(points, variance=0.04, model=ModelKind.CICS, scenario="s"):
    out = []
    for r, p in enumerate(points):
        est = (
            single_estimate(float(p), variance)
            if model is ModelKind.FULL
            else rubin_pool([(float(p) - 0.01, variance), (float(p) + 0.01, variance)])
        )
        out.append(RepResult(scenario=scenario, replicate=r, model=model, estimate=est))
    return out


def _spec(null=False):
    return preset("base-disc30a20c-w50-null" if null else "base-disc30a20c-w50")


def test_rep_result_requires_estimate_or_reason():
    with pytest.raises(ValueError):
        RepResult(scenario="s", replicate=0, model=ModelKind.CICS)
    excluded = RepResult.excluded("s", 0, ModelKind.PICS, "empty cell")
    assert excluded.status == "excluded" and not excluded.significant


def test_full_against_itself_has_no_change(rng):
    full = _results(rng.normal(0.5, 0.2, size=200), model=ModelKind.FULL)
    row = summarize(full, full, 0.5, _spec())
    assert row.coverage_change_pct == pytest.approx(0.0)
    assert row.coverage_change_pp == pytest.approx(0.0)
    assert row.halfwidth_change_pct == pytest.approx(0.0)
    assert row.estimable and row.n_fitted == 200


def test_coverage_and_power_with_mcse(rng):
    points = rng.normal(0.5, 0.2, size=400)
    results = _results(points)
    row = summarize(results, [], TrueEffect(0.5, 0.001, 10, 1), _spec())
    cov = np.mean([r.estimate.covers(0.5) for r in results])
    assert row.coverage_pct == pytest.approx(100 * cov)
    assert row.coverage_mcse == pytest.approx(100 * math.sqrt(cov * (1 - cov) / 400))
    assert row.power_pct == pytest.approx(100 * np.mean([r.significant for r in results]))
    assert row.false_positive_pct is None
    assert row.coverage_change_pct is None
    assert row.bias == pytest.approx(points.mean() - 0.5)
    assert row.bias_pct == pytest.approx(100 * row.bias / 0.5)


def test_bias_mcse_agrees_with_bootstrap():
    rng = np.random.default_rng(21)
    points = rng.normal(0.3, 0.25, size=1000)
    row = summarize(_results(points), [], 0.3, _spec())
    boot = [rng.choice(points, size=points.size).mean() for _ in range(2000)]
    assert row.bias_mcse == pytest.approx(np.std(boot, ddof=1), rel=0.1)


def test_excluded_replicates_leave_denominators(rng):
    results = _results(rng.normal(0.5, 0.2, size=10))
    results += [RepResult.excluded("s", 10 + i, ModelKind.CICS, "separation") for i in range(5)]
    row = summarize(results, [], 0.5, _spec())
    assert row.n_sims == 15 and row.n_fitted == 10
    assert row.fitted_pct == pytest.approx(100 * 10 / 15)


def test_all_excluded_is_non_estimable():
    results = [RepResult.excluded("s", i, ModelKind.PICS, "empty p1 cell") for i in range(4)]
    row = summarize(results, [], 0.4, _spec())
    assert not row.estimable
    assert row.n_fitted == 0 and row.fitted_pct == 0.0
    assert row.coverage_pct is None
    assert "empty p1 cell" in row.reason


def test_null_scenario_reports_false_positives(rng):
    row = summarize(_results(rng.normal(0.0, 0.2, size=100)), [], 0.0, _spec(null=True))
    assert row.null
    assert row.bias_pct is None and row.bias_pct_mcse is None
    assert row.power_pct is None
    assert 0.0 <= row.false_positive_pct <= 100.0


def test_summarize_rejects_mixed_or_empty_input(rng):
    with pytest.raises(ValueError):
        summarize([], [], 0.0, _spec())
    mixed = _results([0.1]) + _results([0.2], model=ModelKind.OICS)
    with pytest.raises(ValueError, match="mix"):
        summarize(mixed, [], 0.0, _spec())


def test_summary_row_has_all_columns(rng):
    row = summarize(_results(rng.normal(0.5, 0.2, size=20)), [], 0.5, _spec())
    assert tuple(row.as_dict()) == SUMMARY_COLUMNS


def test_proportion_mcse():
    assert proportion_mcse(0.95, 100) == pytest.approx(math.sqrt(0.95 * 0.05 / 100))
    assert math.isnan(proportion_mcse(0.5, 0))


def test_modse_relative_error_sign():
    rng = np.random.default_rng(4)
    estimates = rng.normal(0.0, 0.2, size=5000)
    over, mcse = modse_relative_error(np.full(5000, 0.3), estimates)
    under, _ = modse_relative_error(np.full(5000, 0.1), estimates)
    assert over == pytest.approx(50.0, abs=3.0)
    assert under == pytest.approx(-50.0, abs=3.0)
    assert mcse > 0


@pytest.mark.parametrize(
    "result",
    [
        RepResult(scenario="s", replicate=3, model=ModelKind.OITS,
                  estimate=rubin_pool([(0.41, 0.05), (0.47, 0.052), (0.39, 0.049)])),
        RepResult(scenario="s", replicate=2, model=ModelKind.FULL, estimate=single_estimate(0.4, 0.05)),
        RepResult.excluded("s", 4, ModelKind.PICS, "empty p2 cell"),
    ],
    ids=["pooled", "full", "excluded"],
)
def test_replicate_row_round_trip(result):
    assert result_from_row(result_to_row(result)) == result


def test_true_log_or_is_zero_under_equal_arms():
    clear_truth_cache()
    truth = true_log_or(preset("base-disc20a20c-w50-null"), **ORACLE)
    assert truth.mcse > 0
    assert abs(truth.value) <= 4 * truth.mcse


def test_true_log_or_depends_on_discontinuation_not_withdrawal():
    low = true_log_or(preset("base-disc10a10c-w50"), **ORACLE)
    high = true_log_or(preset("base-disc30a30c-w50"), **ORACLE)
    assert low.value > high.value + 4 * max(low.mcse, high.mcse)
    # withdrawal only drives missingness, never the estimand
    other = true_log_or(preset("base-disc10a10c-w70"), **ORACLE)
    assert abs(other.value - low.value) <= 4 * math.hypot(low.mcse, other.mcse)


def test_true_log_or_is_cached():
    spec = preset("base-disc30a20c-w50")
    assert true_log_or(spec, **ORACLE) is true_log_or(spec, **ORACLE)
    clear_truth_cache()
    again = true_log_or(spec, **ORACLE)
    assert again.value == true_log_or(spec, **ORACLE).value


def _frozen_truth():
    doc = json.loads((FIXTURES / "theta_true.json").read_text(encoding="utf-8"))
    oracle = doc["oracle"]
    effect = TrueEffect(
        value=doc["value"],
        mcse=doc["mcse"],
        patients_per_arm=oracle["patients_per_arm"],
        seed=oracle["seed"],
        chunk=oracle["chunk"],
    )
    return preset(doc["scenario"]), effect


def test_frozen_truth_is_reproduced_by_a_smaller_oracle():
    spec, frozen = _frozen_truth()
    assert frozen.seed == settings.ORACLE_SEED
    cheap = true_log_or(spec, patients_per_arm=400_000, chunk=100_000, seed=frozen.seed)
    assert abs(cheap.value - frozen.value) <= 4 * math.hypot(cheap.mcse, frozen.mcse)


def test_frozen_truth_is_served_from_cache():
    spec, frozen = _frozen_truth()
    clear_truth_cache()
    prime_truth_cache(spec, frozen)
    got = true_log_or(spec, patients_per_arm=frozen.patients_per_arm, chunk=frozen.chunk, seed=frozen.seed)
    assert got is frozen
    clear_truth_cache()


def test_priming_needs_a_chunk_size():
    with pytest.raises(ValueError, match="chunk"):
        prime_truth_cache(_spec(), TrueEffect(0.5, 0.001, 10, 1))
