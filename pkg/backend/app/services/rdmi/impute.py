"""
Sequential monotone multiple imputation of the policy outcome.

Visits are imputed in order 1..3. At visit j the model is fitted on the
patients with an observed Y_j (their history is observed too, missingness
being monotone) and every missing Y_j is drawn from a Bernoulli at the
predicted probability under a posterior draw of the coefficients. Imputed
values at visit j feed the covariates of visit j+1 within the same
imputation.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from shared.utils import get_logger

from .dgm import TrialDataset
from .errors import RdsimError
from .glm import DesignMatrix, GlmError, augment, draw_params, fit_logistic, predict_prob
from .scenario import N_VISITS, Arm
from .streams import StreamFactory

logger = get_logger("rdmi-impute")


class ImputationError(RdsimError):
    pass


class EmptyCell(ImputationError):
    """A covariate level needed by the imputation rows has no observed fit row."""


class NonEstimable(ImputationError):
    """The imputation model cannot be fitted for this replicate."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class ModelKind(str, Enum):
    FULL = "full"
    CICS = "cics"
    POOLED_OICS = "pooled_oics"
    OICS = "oics"
    OITS = "oits"
    PICS = "pics"

    @classmethod
    def parse(cls, text: str) -> "ModelKind":
        key = text.strip().lower().replace("-", "_").replace(" ", "_")
        try:
            return cls(key)
        except ValueError:
            raise ValueError(
                f"unknown model '{text}', expected one of {[k.value for k in cls]}"
            ) from None

    @property
    def label(self) -> str:
        return self.value.replace("_", " ").upper()


class Scope(str, Enum):
    WITHIN_ARM = "within_arm"
    POOLED = "pooled"


@dataclass(frozen=True)
class MiModel:
    kind: ModelKind

    @property
    def scope(self) -> Scope:
        return Scope.POOLED if self.kind is ModelKind.POOLED_OICS else Scope.WITHIN_ARM

    @classmethod
    def of(cls, kind: Union[str, ModelKind]) -> "MiModel":
        return cls(kind if isinstance(kind, ModelKind) else ModelKind.parse(kind))


ALL_MODELS: Tuple[MiModel, ...] = tuple(MiModel(k) for k in ModelKind)


@dataclass(frozen=True, eq=False)
class CompletedDataset:
    data: TrialDataset
    y: np.ndarray  # (n, 4) completed policy outcomes
    m: int

    def to_frame(self) -> pd.DataFrame:
        df = self.data.to_frame(y_policy=self.y)
        df.insert(1, "imputation", self.m)
        return df


@dataclass(frozen=True, eq=False)
class VisitDesign:
    fit: DesignMatrix
    fit_rows: np.ndarray
    impute_rows: np.ndarray
    impute_x: np.ndarray
    keep: np.ndarray  # column indices kept from the full covariate set
    dropped: Tuple[str, ...]


def covariates(
    model: MiModel,
    data: TrialDataset,
    y: np.ndarray,
    j: int,
    rows: np.ndarray,
) -> Tuple[np.ndarray, Tuple[str, ...]]:
    """Full covariate set of `model` at visit j for the given rows."""
    if model.kind is ModelKind.FULL:
        raise ImputationError("FULL does not impute")
    cols: List[np.ndarray] = [np.ones(rows.size)]
    names: List[str] = ["intercept"]
    t = data.ie_time[rows].astype(int)
    d_j = ((t > 0) & (t <= j)).astype(float)

    if model.kind is ModelKind.OITS:
        cols.append(np.where(d_j > 0, j - t, 0).astype(float))
        names.append("time")
    if model.kind in (ModelKind.POOLED_OICS, ModelKind.OICS, ModelKind.OITS):
        cols.append(d_j)
        names.append(f"d{j}")
    if model.kind is ModelKind.PICS:
        for k in range(1, j + 1):
            cols.append((t == k).astype(float))
            names.append(f"p{k}")
    for k in range(j):
        cols.append(y[rows, k].astype(float))
        names.append(f"y{k}")
    return np.column_stack(cols), tuple(names)


def build_design(
    model: MiModel,
    data: TrialDataset,
    j: int,
    rows: np.ndarray,
    y: Optional[np.ndarray] = None,
) -> VisitDesign:
    """
    Fit and imputation design for visit j over one scope slice.

    A column constant over the fit rows is dropped. For the discontinuation
    covariates (indicator, time, pattern) this is only allowed when the
    imputation rows share the constant; otherwise that level has no observed
    row and EmptyCell is raised. Outcome-history columns are dropped either
    way, since their imputation-row values change with each imputation.
    """
    if not 1 <= j <= N_VISITS:
        raise ValueError(f"visit must be in 1..{N_VISITS}, got {j}")
    y = data.y_observed if y is None else y
    rows = np.asarray(rows)
    if rows.dtype == bool:
        rows = np.flatnonzero(rows)
    obs = data.observed[rows, j]
    fit_rows = rows[obs]
    imp_rows = rows[~obs]
    if imp_rows.size and np.any(y[imp_rows, :j] < 0):
        raise ImputationError(f"visits before {j} are not complete")
    if fit_rows.size == 0:
        raise EmptyCell(f"{model.kind.label} visit {j}: no observed rows")

    X_fit, names = covariates(model, data, y, j, fit_rows)
    X_imp, _ = covariates(model, data, y, j, imp_rows)

    keep: List[int] = [0]
    dropped: List[str] = []
    for c in range(1, X_fit.shape[1]):
        col = X_fit[:, c]
        if np.all(col == col[0]):
            structural = not names[c].startswith("y")
            if structural and imp_rows.size and np.any(X_imp[:, c] != col[0]):
                raise EmptyCell(f"{model.kind.label} visit {j}: no observed rows for {names[c]}")
            dropped.append(names[c])
        else:
            keep.append(c)
    keep_idx = np.asarray(keep)

    fit = DesignMatrix.build(
        X_fit[:, keep_idx],
        y[fit_rows, j],
        names=[names[c] for c in keep],
    )
    return VisitDesign(
        fit=fit,
        fit_rows=fit_rows,
        impute_rows=imp_rows,
        impute_x=X_imp[:, keep_idx],
        keep=keep_idx,
        dropped=tuple(dropped),
    )


def draw_outcomes(beta: np.ndarray, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli(expit(x @ beta)) per row, one uniform each."""
    p = predict_prob(beta, x)
    return (rng.random(p.shape[0]) < p).astype(np.int8)


def _slices(model: MiModel, data: TrialDataset) -> List[Tuple[str, np.ndarray]]:
    if model.scope is Scope.POOLED:
        return [("pooled", np.arange(data.n))]
    return [(arm.value, np.flatnonzero(data.arm_mask(arm))) for arm in (Arm.ACTIVE, Arm.CONTROL)]


def impute_sequential(
    data: TrialDataset,
    model: MiModel,
    M: int,
    streams: StreamFactory,
) -> List[CompletedDataset]:
    """
    Produce M completed datasets (one for FULL, which needs no imputation).

    Streams are keyed by (m, visit, slice) under the caller's factory, so
    every model sees the same draws for the same cell and two models with
    identical designs complete the data identically.

    Raises:
        NonEstimable: a visit design has an empty cell or a fit fails
    """
    if model.kind is ModelKind.FULL:
        return [CompletedDataset(data=data, y=data.y_policy, m=1)]
    if M < 1:
        raise ValueError("M must be positive")

    completed = np.repeat(data.y_observed[None, :, :], M, axis=0)
    for j in range(1, N_VISITS + 1):
        for label, rows in _slices(model, data):
            try:
                design = build_design(model, data, j, rows, completed[0])
            except EmptyCell as e:
                raise NonEstimable(str(e)) from e
            if design.impute_rows.size == 0:
                continue
            try:
                fit = fit_logistic(augment(design.fit))
            except GlmError as e:
                raise NonEstimable(f"{model.kind.label} visit {j} {label}: {e}") from e

            imp = design.impute_rows
            for m in range(M):
                rng = streams(m + 1, j, label)
                try:
                    beta = draw_params(fit, rng)
                except GlmError as e:
                    raise NonEstimable(f"{model.kind.label} visit {j} {label}: {e}") from e
                if m == 0:
                    x = design.impute_x
                else:
                    x_full, _ = covariates(model, data, completed[m], j, imp)
                    x = x_full[:, design.keep]
                completed[m, imp, j] = draw_outcomes(beta, x, rng).astype(completed.dtype)

    return [CompletedDataset(data=data, y=completed[m], m=m + 1) for m in range(M)]
