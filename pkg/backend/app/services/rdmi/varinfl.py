"""
Closed-form variance inflation of a treatment-policy response proportion
when part of the post-discontinuation outcomes is missing.

Patients fall into three groups: completers on treatment (n1, response p1),
discontinued patients observed at the endpoint (n2, response p2) and
discontinued patients missing at the endpoint (n3, assumed to respond like
group 2). Group 3 contributes no information, so the group 2/3 proportion
is estimated from n2 patients only.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import RdsimError


class VarianceInflationError(RdsimError, ValueError):
    pass


class GroupCounts(BaseModel):
    model_config = ConfigDict(frozen=True)

    n1: int = Field(ge=0)
    n2: int = Field(ge=0)
    n3: int = Field(ge=0)
    p1: float = Field(gt=0.0, lt=1.0)
    p2: float = Field(gt=0.0, lt=1.0)

    @property
    def n(self) -> int:
        return self.n1 + self.n2 + self.n3

    @classmethod
    def of(cls, n1: int, n2: int, n3: int, p1: float, p2: float) -> "GroupCounts":
        try:
            return cls(n1=n1, n2=n2, n3=n3, p1=p1, p2=p2)
        except ValidationError as e:
            checks = "; ".join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors())
            raise VarianceInflationError(f"invalid group counts: {checks}") from e


def _require_n(g: GroupCounts) -> int:
    if g.n == 0:
        raise VarianceInflationError("no patients (n1 + n2 + n3 = 0)")
    return g.n


def _require_n2(g: GroupCounts) -> None:
    if g.n2 == 0:
        raise VarianceInflationError("n2 must be positive: no observed discontinued patients")


def policy_proportion(g: GroupCounts) -> float:
    """pi_policy = (n1 p1 + (n2 + n3) p2) / N."""
    n = _require_n(g)
    return (g.n1 * g.p1 + (g.n2 + g.n3) * g.p2) / n


def full_variance(g: GroupCounts) -> float:
    """Variance of pi_policy when every endpoint is observed."""
    n = _require_n(g)
    v1 = g.p1 * (1.0 - g.p1)
    v2 = g.p2 * (1.0 - g.p2)
    return (g.n1 * v1 + (g.n2 + g.n3) * v2) / n ** 2


def missing_variance(g: GroupCounts) -> float:
    """Variance of pi_policy when group 3 is missing at the endpoint."""
    n = _require_n(g)
    _require_n2(g)
    v1 = g.p1 * (1.0 - g.p1)
    v2 = g.p2 * (1.0 - g.p2)
    return (g.n1 * v1 + (g.n2 + g.n3) ** 2 * v2 / g.n2) / n ** 2


def absolute_variance_increase(g: GroupCounts) -> float:
    """n3 p2 (1 - p2) (1 + n3 / n2) / N^2."""
    n = _require_n(g)
    _require_n2(g)
    return g.n3 * g.p2 * (1.0 - g.p2) * (1.0 + g.n3 / g.n2) / n ** 2


def relative_variance_increase(g: GroupCounts) -> float:
    """
    (Var_missing - Var_full) / Var_full
    = n3 p2 (1 - p2) (1 + n3 / n2) / (n1 p1 (1 - p1) + p2 (1 - p2) (n2 + n3)).

    With p1 == p2 this is (n3 / N)(1 + n3 / n2), the continuous-endpoint
    inflation.

    Raises:
        VarianceInflationError: N = 0 or n2 = 0
    """
    n = _require_n(g)
    _require_n2(g)
    if g.p1 == g.p2:
        return (g.n3 / n) * (1.0 + g.n3 / g.n2)
    v1 = g.p1 * (1.0 - g.p1)
    v2 = g.p2 * (1.0 - g.p2)
    return g.n3 * v2 * (1.0 + g.n3 / g.n2) / (g.n1 * v1 + v2 * (g.n2 + g.n3))


@dataclass(frozen=True)
class InflationReport:
    n1: int
    n2: int
    n3: int
    p1: float
    p2: float
    policy_proportion: float
    full_variance: float
    missing_variance: float
    absolute_increase: float
    relative_increase: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def inflation_report(g: GroupCounts) -> InflationReport:
    return InflationReport(
        n1=g.n1,
        n2=g.n2,
        n3=g.n3,
        p1=g.p1,
        p2=g.p2,
        policy_proportion=policy_proportion(g),
        full_variance=full_variance(g),
        missing_variance=missing_variance(g),
        absolute_increase=absolute_variance_increase(g),
        relative_increase=relative_variance_increase(g),
    )
