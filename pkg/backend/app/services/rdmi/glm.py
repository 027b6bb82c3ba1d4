"""
Weighted binary logistic regression by IRLS (Newton-Raphson with step
halving), data augmentation against perfect prediction, and approximate
posterior draws of the coefficients.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, cholesky
from scipy.special import expit

from shared.config import settings

from .errors import RdsimError

JITTER_LADDER = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
MAX_HALVINGS = 20
# pivots below this (relative) mean the normal equations are numerically singular
_MIN_PIVOT_RATIO = 1e-14
_EPS = np.finfo(float).eps


class GlmError(RdsimError):
    """Logistic model could not be estimated."""


class NonConverged(GlmError):
    pass


class RankDeficient(GlmError):
    pass


class CholeskyFailure(GlmError):
    pass


class DimensionMismatch(GlmError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Covariates (leading intercept column), 0/1 outcomes and case weights."""

    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    names: Tuple[str, ...]
    n_pseudo: int = 0

    def __post_init__(self) -> None:
        X, y, w = self.X, self.y, self.w
        if X.ndim != 2:
            raise DimensionMismatch("X must be 2-dimensional")
        if y.shape != (X.shape[0],) or w.shape != (X.shape[0],):
            raise DimensionMismatch(
                f"row counts differ: X={X.shape[0]} y={y.shape} w={w.shape}"
            )
        if len(self.names) != X.shape[1]:
            raise DimensionMismatch(f"{len(self.names)} names for {X.shape[1]} columns")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y)) and np.all(np.isfinite(w))):
            raise GlmError("design contains non-finite entries")
        if np.any(w < 0):
            raise GlmError("case weights must be non-negative")
        if np.any((y != 0) & (y != 1)):
            raise GlmError("outcomes must be 0/1")

    @classmethod
    def build(
        cls,
        X: np.ndarray,
        y: np.ndarray,
        w: Optional[np.ndarray] = None,
        names: Optional[Sequence[str]] = None,
    ) -> "DesignMatrix":
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(y, dtype=float).reshape(-1)
        w = np.ones(X.shape[0]) if w is None else np.asarray(w, dtype=float).reshape(-1)
        if names is None:
            names = ["intercept"] + [f"x{k}" for k in range(1, X.shape[1])]
        return cls(X=X, y=y, w=w, names=tuple(names))

    @property
    def n_rows(self) -> int:
        return int(self.X.shape[0])

    @property
    def n_cols(self) -> int:
        return int(self.X.shape[1])


@dataclass(frozen=True, eq=False)
class FitResult:
    coef: np.ndarray
    cov: np.ndarray
    converged: bool
    iterations: int
    max_abs_coef: float
    max_abs_score: float
    names: Tuple[str, ...]

    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def coef_of(self, name: str) -> float:
        return float(self.coef[self.names.index(name)])

    def var_of(self, name: str) -> float:
        k = self.names.index(name)
        return float(self.cov[k, k])


def log_likelihood(beta: np.ndarray, dm: DesignMatrix) -> float:
    eta = dm.X @ beta
    return float(np.sum(dm.w * (dm.y * eta - np.logaddexp(0.0, eta))))


def score(beta: np.ndarray, dm: DesignMatrix) -> np.ndarray:
    p = expit(dm.X @ beta)
    return dm.X.T @ (dm.w * (dm.y - p))


def row_gradient(beta: np.ndarray, x: np.ndarray, y: float) -> np.ndarray:
    """Gradient of one row's Bernoulli log-likelihood with respect to beta."""
    x = np.asarray(x, dtype=float)
    return (y - float(expit(x @ beta))) * x


def _information(beta: np.ndarray, dm: DesignMatrix) -> np.ndarray:
    p = expit(dm.X @ beta)
    v = dm.w * p * (1.0 - p)
    return (dm.X * v[:, None]).T @ dm.X


def _factor_with_ladder(H: np.ndarray, err: type) -> Tuple[np.ndarray, bool]:
    """Cholesky-factor H, adding diagonal jitter from the ladder as needed."""
    k = H.shape[0]
    scale = float(np.mean(np.abs(np.diag(H)))) or 1.0
    for lam in JITTER_LADDER:
        try:
            c, lower = cho_factor(H + lam * scale * np.eye(k), lower=True, check_finite=False)
        except LinAlgError:
            continue
        d = np.abs(np.diag(c))
        if d.min() ** 2 <= _MIN_PIVOT_RATIO * d.max() ** 2:
            continue
        return c, lower
    raise err(f"matrix singular beyond ridge tolerance (k={k})")


def fit_logistic(
    dm: DesignMatrix,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
) -> FitResult:
    """
    Maximise the weighted Bernoulli log-likelihood.

    Converged when the max absolute score is below tol, or when a Newton
    step changes the coefficients by less than tol relative to their size.

    Raises:
        NonConverged: iterations or step halvings exhausted
        RankDeficient: normal equations singular after the jitter ladder
    """
    tol = settings.IRLS_TOL if tol is None else tol
    max_iter = settings.IRLS_MAX_ITER if max_iter is None else max_iter
    if not np.any(dm.w > 0):
        raise GlmError("no rows with positive weight")

    k = dm.n_cols
    beta = np.zeros(k)
    ll = log_likelihood(beta, dm)
    converged = False
    it = 0
    g = score(beta, dm)
    while it < max_iter:
        if np.max(np.abs(g)) < tol:
            converged = True
            break
        it += 1
        factor = _factor_with_ladder(_information(beta, dm), RankDeficient)
        step = cho_solve(factor, g, check_finite=False)
        t = 1.0
        floor = ll - 1e-12 * max(1.0, abs(ll))
        cand = beta + step
        ll_new = log_likelihood(cand, dm)
        for _ in range(MAX_HALVINGS):
            if ll_new >= floor:
                break
            t *= 0.5
            cand = beta + t * step
            ll_new = log_likelihood(cand, dm)
        if not ll_new >= floor:
            raise NonConverged(
                f"step halving exhausted at iteration {it} "
                f"(max|score|={np.max(np.abs(g)):.3g}, max|beta|={np.max(np.abs(beta)):.3g})"
            )
        rel = float(np.max(np.abs(cand - beta)) / max(1.0, float(np.max(np.abs(cand)))))
        beta, ll = cand, ll_new
        g = score(beta, dm)
        if rel < tol:
            converged = True
            break

    if not converged:
        raise NonConverged(
            f"IRLS did not converge in {max_iter} iterations "
            f"(max|score|={np.max(np.abs(g)):.3g}, max|beta|={np.max(np.abs(beta)):.3g})"
        )

    factor = _factor_with_ladder(_information(beta, dm), RankDeficient)
    cov = cho_solve(factor, np.eye(k), check_finite=False)
    cov = 0.5 * (cov + cov.T)
    return FitResult(
        coef=beta,
        cov=cov,
        converged=True,
        iterations=it,
        max_abs_coef=float(np.max(np.abs(beta))) if k else 0.0,
        max_abs_score=float(np.max(np.abs(g))) if k else 0.0,
        names=dm.names,
    )


def augment(dm: DesignMatrix) -> DesignMatrix:
    """
    Append pseudo-observations that keep the likelihood maximum finite.

    Each of the K columns contributes two rows, outcome 1 and outcome 0, at
    the weighted column means with that column displaced by one weighted SD
    (the intercept stays at its mean). Both outcomes sit at every pseudo
    point, so no hyperplane separates the augmented data. Each pseudo-row
    weighs K / (2 * 2K); the total added weight is K/2.
    """
    if dm.n_rows == 0:
        raise GlmError("cannot augment an empty design")
    X, w = dm.X, dm.w
    k = dm.n_cols
    wsum = float(w.sum())
    if wsum <= 0:
        wsum = float(dm.n_rows)
        w = np.ones(dm.n_rows)
    mean = (w[:, None] * X).sum(axis=0) / wsum
    sd = np.sqrt((w[:, None] * (X - mean) ** 2).sum(axis=0) / wsum)

    points = np.repeat(mean[None, :], 2 * k, axis=0)
    for j in range(k):
        if dm.names[j] != "intercept":
            points[2 * j: 2 * j + 2, j] += sd[j]
    outcomes = np.tile([1.0, 0.0], k)
    n_pseudo = 2 * k
    weight = k / (2.0 * n_pseudo)

    return DesignMatrix(
        X=np.vstack([dm.X, points]),
        y=np.concatenate([dm.y, outcomes]),
        w=np.concatenate([dm.w, np.full(n_pseudo, weight)]),
        names=dm.names,
        n_pseudo=dm.n_pseudo + n_pseudo,
    )


def draw_params(fit: FitResult, rng: np.random.Generator) -> np.ndarray:
    """
    Approximate posterior draw beta* = beta_hat + L z with L L^T = V_hat.

    Raises:
        CholeskyFailure: V_hat not factorisable even after jitter
    """
    if not fit.converged:
        raise GlmError("cannot draw from a fit that did not converge")
    if not np.any(fit.cov):
        return fit.coef.copy()
    try:
        lower = cholesky(fit.cov, lower=True, check_finite=False)
    except LinAlgError:
        c, _ = _factor_with_ladder(fit.cov, CholeskyFailure)
        lower = np.tril(c)
    z = rng.standard_normal(fit.coef.shape[0])
    return fit.coef + lower @ z


def predict_prob(beta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """expit(x . beta), clamped into (0, 1). x may be one row or a matrix."""
    beta = np.asarray(beta, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != beta.shape[0]:
        raise DimensionMismatch(f"x has {x.shape[-1]} columns, beta has {beta.shape[0]}")
    return np.clip(expit(x @ beta), _EPS, 1.0 - _EPS)
