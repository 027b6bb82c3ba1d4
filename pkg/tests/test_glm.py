import math

import numpy as np
import pytest

from app.services.rdmi import glm
from app.services.rdmi.glm import (
    DesignMatrix,
    DimensionMismatch,
    FitResult,
    GlmError,
    NonConverged,
    augment,
    draw_params,
    fit_logistic,
    predict_prob,
    row_gradient,
)
from shared.config import settings


def _two_by_two(s0: float, s1: float, n: float = 100.0) -> DesignMatrix:
    """Grouped 2x2 data: s0/n successes at x=0 and s1/n at x=1."""
    X = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
    y = np.array([1.0, 0.0, 1.0, 0.0])
    w = np.array([s0, n - s0, s1, n - s1])
    return DesignMatrix.build(X, y, w=w, names=["intercept", "x"])


def _random_design(rng: np.random.Generator, n: int = 400) -> DesignMatrix:
    X = np.column_stack([np.ones(n), rng.integers(0, 2, n), rng.normal(size=n)])
    p = 1.0 / (1.0 + np.exp(-(X @ np.array([-0.4, 0.8, 0.5]))))
    y = (rng.random(n) < p).astype(float)
    return DesignMatrix.build(X, y)


def test_closed_form_two_by_two():
    fit = fit_logistic(_two_by_two(30, 45))
    assert fit.converged
    assert fit.coef_of("x") == pytest.approx(math.log((45 / 55) / (30 / 70)), abs=1e-8)
    assert fit.coef_of("intercept") == pytest.approx(math.log(30 / 70), abs=1e-8)
    # saturated-model variance: sum of reciprocal cell counts
    assert fit.var_of("x") == pytest.approx(1 / 30 + 1 / 70 + 1 / 45 + 1 / 55, rel=1e-6)


def test_equal_groups_have_zero_slope():
    fit = fit_logistic(_two_by_two(40, 40))
    assert abs(fit.coef_of("x")) < 1e-10


def test_score_small_at_optimum(rng):
    dm = _random_design(rng)
    fit = fit_logistic(dm)
    assert fit.max_abs_score < settings.IRLS_TOL
    assert np.allclose(fit.cov, fit.cov.T)
    assert np.all(np.linalg.eigvalsh(fit.cov) > 0)


def test_constant_weights_scale_covariance(rng):
    dm = _random_design(rng)
    scaled = DesignMatrix.build(dm.X, dm.y, w=np.full(dm.n_rows, 3.0))
    a, b = fit_logistic(dm), fit_logistic(scaled)
    assert np.allclose(a.coef, b.coef, atol=1e-9)
    assert np.allclose(a.cov / 3.0, b.cov, rtol=1e-6)


def test_row_order_invariance(rng):
    dm = _random_design(rng)
    perm = rng.permutation(dm.n_rows)
    shuffled = DesignMatrix.build(dm.X[perm], dm.y[perm])
    assert np.allclose(fit_logistic(dm).coef, fit_logistic(shuffled).coef, atol=1e-9)


def test_separation_diverges_without_augmentation():
    X = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
    y = np.array([0.0, 0.0, 1.0, 1.0])
    dm = DesignMatrix.build(X, y)
    try:
        fit = fit_logistic(dm)
    except GlmError:
        pass
    else:
        assert fit.max_abs_coef > 10

    fit = fit_logistic(augment(dm))
    assert fit.converged
    assert np.all(np.isfinite(fit.coef)) and fit.max_abs_coef < 20
    assert np.all(np.linalg.eigvalsh(fit.cov) > 0)


def test_augmentation_fixes_random_separated_designs():
    rng = np.random.default_rng(11)
    for _ in range(25):
        n = int(rng.integers(3, 30))
        X = np.column_stack([np.ones(n), rng.normal(size=n), rng.integers(0, 2, n)])
        X[:2, 2] = (0.0, 1.0)
        y = (X[:, 1] > 0).astype(float)
        fit = fit_logistic(augment(DesignMatrix.build(X, y)))
        assert fit.converged and np.all(np.isfinite(fit.coef))


def test_augment_counts_and_weights():
    dm = _two_by_two(30, 45)
    aug = augment(dm)
    assert aug.n_rows == dm.n_rows + 4
    assert aug.n_pseudo == 4
    assert aug.w[dm.n_rows:].sum() == pytest.approx(1.0)
    assert set(aug.y[dm.n_rows:]) == {0.0, 1.0}
    # not idempotent
    assert augment(aug).n_rows == dm.n_rows + 8


def test_design_validation():
    with pytest.raises(DimensionMismatch):
        DesignMatrix.build(np.ones((3, 2)), np.ones(4))
    with pytest.raises(GlmError, match="0/1"):
        DesignMatrix.build(np.ones((2, 1)), np.array([0.0, 2.0]))
    with pytest.raises(GlmError, match="non-finite"):
        DesignMatrix.build(np.array([[1.0], [np.nan]]), np.array([0.0, 1.0]))
    with pytest.raises(GlmError, match="positive weight"):
        fit_logistic(DesignMatrix.build(np.ones((2, 1)), np.array([0.0, 1.0]), w=np.zeros(2)))


def test_draw_params_zero_covariance_returns_estimate():
    fit = FitResult(
        coef=np.array([0.2, -0.1]),
        cov=np.zeros((2, 2)),
        converged=True,
        iterations=1,
        max_abs_coef=0.2,
        max_abs_score=0.0,
        names=("intercept", "x"),
    )
    assert np.array_equal(draw_params(fit, np.random.default_rng(0)), fit.coef)


def test_draw_params_moments():
    fit = fit_logistic(_two_by_two(30, 45))
    rng = np.random.default_rng(12)
    draws = np.array([draw_params(fit, rng) for _ in range(10_000)])
    se = np.sqrt(np.diag(fit.cov) / draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - fit.coef) < 3 * se)
    assert np.allclose(np.cov(draws.T), fit.cov, rtol=0.1)


def test_draw_params_is_reproducible():
    fit = fit_logistic(_two_by_two(30, 45))
    a = draw_params(fit, np.random.default_rng(5))
    b = draw_params(fit, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_predict_prob():
    assert predict_prob(np.array([0.0, 1.0]), np.array([1.0, 0.0])) == pytest.approx(0.5)
    assert predict_prob(np.array([math.log(3)]), np.array([1.0])) == pytest.approx(0.75)
    p = predict_prob(np.array([1000.0]), np.array([[1.0], [-1.0]]))
    assert np.all((p > 0) & (p < 1))
    with pytest.raises(DimensionMismatch):
        predict_prob(np.array([1.0, 2.0]), np.array([1.0, 2.0, 3.0]))


def test_row_gradient_matches_finite_differences():
    beta = np.array([0.3, -0.7, 0.2])
    x = np.array([1.0, 0.5, -1.5])
    h = 1e-6

    def loglik(b, y):
        p = float(predict_prob(b, x))
        return y * math.log(p) + (1 - y) * math.log(1 - p)

    for y in (0.0, 1.0):
        grad = row_gradient(beta, x, y)
        for k in range(beta.size):
            e = np.zeros_like(beta)
            e[k] = h
            fd = (loglik(beta + e, y) - loglik(beta - e, y)) / (2 * h)
            assert fd == pytest.approx(grad[k], rel=1e-6, abs=1e-9)


def test_exhausted_step_halving_is_not_convergence(rng, monkeypatch):
    dm = _random_design(rng)
    real = glm.log_likelihood
    # every move away from the start looks worse, so no step can be accepted
    monkeypatch.setattr(glm, "log_likelihood", lambda beta, d: real(beta, d) if not np.any(beta) else -np.inf)
    with pytest.raises(NonConverged, match="step halving exhausted"):
        fit_logistic(dm)
