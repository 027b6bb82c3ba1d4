import math

import numpy as np
import pytest
from scipy.stats import norm

from app.services.rdmi.impute import CompletedDataset
from app.services.rdmi.pool import (
    PoolingError,
    analyze,
    cell_counts,
    pool_completed,
    rubin_pool,
    single_estimate,
)


def _completed(make_dataset, active_rate: float, control_rate: float, per_stratum: int = 100) -> CompletedDataset:
    """Both arms, Y_0 split evenly, final response independent of Y_0."""
    blocks = []
    for arm, rate in ((1, active_rate), (0, control_rate)):
        for y0 in (0, 1):
            ones = int(round(rate * per_stratum))
            y3 = np.r_[np.ones(ones), np.zeros(per_stratum - ones)]
            y = np.zeros((per_stratum, 4))
            y[:, 0] = y0
            y[:, 3] = y3
            blocks.append((np.full(per_stratum, arm), y))
    arm = np.concatenate([b[0] for b in blocks])
    y = np.vstack([b[1] for b in blocks]).astype(np.int8)
    data = make_dataset(arm, y)
    return CompletedDataset(data=data, y=y, m=1)


def test_analyze_recovers_closed_form_log_or(make_dataset):
    est, var = analyze(_completed(make_dataset, 0.45, 0.30))
    assert est == pytest.approx(math.log((0.45 / 0.55) / (0.30 / 0.70)), abs=1e-7)
    assert var > 0


def test_analyze_identical_arms_gives_zero(make_dataset):
    est, _ = analyze(_completed(make_dataset, 0.35, 0.35))
    assert abs(est) < 1e-8


def test_relabelling_arms_flips_sign(make_dataset):
    cd = _completed(make_dataset, 0.45, 0.30)
    flipped_data = make_dataset(1 - cd.data.arm, cd.y)
    a, va = analyze(cd)
    b, vb = analyze(CompletedDataset(data=flipped_data, y=cd.y, m=1))
    assert b == pytest.approx(-a, abs=1e-7)
    assert vb == pytest.approx(va, rel=1e-8)


def test_cell_counts():
    counts = cell_counts(np.array([1, 1, 0]), np.array([0, 1, 1]), np.array([1, 1, 0]))
    assert counts.tolist() == [0, 0, 1, 0, 0, 1, 0, 1]


def test_rubin_degenerate_between_variance():
    pooled = rubin_pool([(1.0, 0.04)] * 5)
    assert pooled.point == pytest.approx(1.0)
    assert pooled.between_var == 0.0
    assert pooled.total_var == pytest.approx(0.04)
    assert math.isinf(pooled.df)
    crit = norm.ppf(0.975)
    assert pooled.ci_low == pytest.approx(1.0 - crit * 0.2)
    assert pooled.ci_high == pytest.approx(1.0 + crit * 0.2)


def test_rubin_two_imputations_hand_computed():
    pooled = rubin_pool([(0.0, 1.0), (1.0, 1.0)])
    assert pooled.point == pytest.approx(0.5)
    assert pooled.within_var == pytest.approx(1.0)
    assert pooled.between_var == pytest.approx(0.5)
    assert pooled.total_var == pytest.approx(1.75)
    assert pooled.df == pytest.approx((1 + 1 / 0.75) ** 2)
    assert pooled.se == pytest.approx(math.sqrt(1.75))
    assert pooled.ci_low < pooled.point < pooled.ci_high
    assert pooled.m_used == 2


def test_rubin_is_permutation_invariant():
    rng = np.random.default_rng(3)
    pairs = [(float(p), float(v)) for p, v in zip(rng.normal(size=8), rng.uniform(0.1, 0.3, size=8))]
    a = rubin_pool(pairs)
    b = rubin_pool(pairs[::-1])
    assert a.point == pytest.approx(b.point)
    assert a.total_var == pytest.approx(b.total_var)
    assert a.df == pytest.approx(b.df)


def test_rubin_total_exceeds_within_and_width_grows_with_between():
    narrow = rubin_pool([(0.9, 0.04), (1.0, 0.04), (1.1, 0.04)])
    wide = rubin_pool([(0.5, 0.04), (1.0, 0.04), (1.5, 0.04)])
    assert narrow.total_var > narrow.within_var
    assert wide.halfwidth > narrow.halfwidth


def test_rubin_df_grows_with_imputations():
    rng = np.random.default_rng(8)
    points = rng.normal(0.0, 0.1, size=400)
    dfs = [rubin_pool([(float(p), 0.04) for p in points[:m]]).df for m in (5, 50, 400)]
    assert dfs[0] < dfs[1] < dfs[2]


def test_rubin_errors():
    with pytest.raises(PoolingError, match="M >= 2"):
        rubin_pool([(1.0, 0.1)])
    with pytest.raises(PoolingError, match="non-finite"):
        rubin_pool([(1.0, 0.1), (float("nan"), 0.1)])
    with pytest.raises(PoolingError, match="within"):
        rubin_pool([(1.0, 0.0), (2.0, 0.0)])
    with pytest.raises(PoolingError):
        rubin_pool([(1.0, 0.1), (2.0, 0.1)], M=3)


def test_significance_is_directional():
    assert rubin_pool([(1.0, 0.04), (1.0, 0.04)]).significant
    assert not rubin_pool([(-1.0, 0.04), (-1.0, 0.04)]).significant
    assert not rubin_pool([(0.1, 0.04), (0.1, 0.04)]).significant


def test_single_dataset_uses_wald_inference(make_dataset):
    cd = _completed(make_dataset, 0.45, 0.30)
    pooled = pool_completed([cd])
    est, var = analyze(cd)
    assert pooled == single_estimate(est, var)
    assert pooled.m_used == 1 and math.isinf(pooled.df)
