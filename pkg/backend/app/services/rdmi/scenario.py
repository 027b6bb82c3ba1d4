"""
Simulation scenarios: response and discontinuation schedules, the scenario
document format, and the named presets of both simulation studies and the
stress test.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
from enum import Enum
from pathlib import Path
from typing import Annotated, Any, Dict, List, Optional, Tuple, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from shared.config import settings
from shared.utils import get_logger

from .errors import ScenarioError

logger = get_logger("rdmi-scenario")

N_VISITS = 3  # post-baseline visits


class Arm(str, Enum):
    """随机化治疗组"""
    ACTIVE = "active"
    CONTROL = "control"

    @property
    def code(self) -> int:
        return 1 if self is Arm.ACTIVE else 0


class CopulaStructure(str, Enum):
    """How on- and off-treatment latent coordinates are correlated."""
    EXCHANGEABLE = "exchangeable"  # one 7x7 exchangeable block
    BLOCK = "block"  # on (4x4) and off (3x3) blocks, independent of each other


class WithdrawalMode(str, Enum):
    QUOTA = "quota"
    TRIAL_RANK = "trial_rank"


Rate = Annotated[float, Field(gt=0.0, lt=1.0)]
Fraction = Annotated[float, Field(ge=0.0, le=1.0)]


def round_half_up(x: float) -> int:
    # the epsilon absorbs binary noise such as 0.7 * 5 = 3.4999999999999996
    return int(math.floor(x + 0.5 + 1e-9))


class ResponseSchedule(BaseModel):
    """Response probabilities of one arm: on-treatment at visits 0..3, off-treatment at 1..3."""

    model_config = ConfigDict(frozen=True)

    arm: Arm
    on_rates: Tuple[Rate, Rate, Rate, Rate]
    off_rates: Tuple[Rate, Rate, Rate]

    def rate(self, visit: int, on_treatment: bool) -> float:
        if on_treatment:
            return self.on_rates[visit]
        if visit < 1:
            raise ValueError("no off-treatment rate at baseline")
        return self.off_rates[visit - 1]

    def same_rates(self, other: "ResponseSchedule") -> bool:
        return self.on_rates == other.on_rates and self.off_rates == other.off_rates


class DiscontinuationSchedule(BaseModel):
    """Incremental discontinuation proportions (fractions of N) at visits 1..3, per arm."""

    model_config = ConfigDict(frozen=True)

    active: Tuple[Fraction, Fraction, Fraction]
    control: Tuple[Fraction, Fraction, Fraction]

    @model_validator(mode="after")
    def _check_sums(self) -> "DiscontinuationSchedule":
        for arm in Arm:
            if sum(self.for_arm(arm)) > 1.0 + 1e-12:
                raise ValueError(f"disc.{arm.value} sums to more than 1")
        return self

    def for_arm(self, arm: Arm) -> Tuple[float, float, float]:
        return self.active if arm is Arm.ACTIVE else self.control

    def headline(self, arm: Arm) -> float:
        return float(sum(self.for_arm(arm)))

    def ie_targets(self, arm: Arm, n: int) -> Tuple[int, int, int]:
        """
        Per-visit IE counts for an arm of size n.

        Cumulative proportions are rounded half-up and differenced, so the
        counts always add up to round(headline * n).
        """
        out: List[int] = []
        prev = 0
        cum = 0.0
        for frac in self.for_arm(arm):
            cum += frac
            k = min(n, round_half_up(cum * n))
            out.append(max(0, k - prev))
            prev = max(prev, k)
        return (out[0], out[1], out[2])


class ScenarioSpec(BaseModel):
    """One simulation cell. Immutable once validated."""

    model_config = ConfigDict(frozen=True)

    name: str = "custom"
    n_per_arm: int = Field(gt=0)
    active: ResponseSchedule
    control: ResponseSchedule
    disc: DiscontinuationSchedule
    withdrawal_rate: Fraction
    rho: float = Field(default=0.5, ge=0.0, lt=1.0)
    omega: float = 0.75
    null: bool = False
    n_sims: int = Field(default_factory=lambda: settings.RDSIM_DEFAULT_SIMS, gt=0)
    n_imputations: int = Field(default=25, ge=2)
    master_seed: int = Field(default=12345, ge=0)
    copula: CopulaStructure = CopulaStructure.EXCHANGEABLE
    withdrawal_mode: WithdrawalMode = WithdrawalMode.QUOTA

    @model_validator(mode="before")
    @classmethod
    def _apply_null(cls, data: Any) -> Any:
        # null scenarios: Active schedules are overwritten by Control's
        if not isinstance(data, dict) or not _truthy(data.get("null")):
            return data
        control = data.get("control")
        if isinstance(control, ResponseSchedule):
            control = control.model_dump()
        if isinstance(control, dict):
            data = dict(data)
            data["active"] = {**control, "arm": Arm.ACTIVE}
        return data

    @model_validator(mode="after")
    def _check_arms(self) -> "ScenarioSpec":
        if self.active.arm is not Arm.ACTIVE or self.control.arm is not Arm.CONTROL:
            raise ValueError("response schedules must be labelled active/control")
        if self.null and not self.active.same_rates(self.control):
            raise ValueError("null scenario requires identical Active and Control schedules")
        return self

    def schedule(self, arm: Arm) -> ResponseSchedule:
        return self.active if arm is Arm.ACTIVE else self.control

    def spec_hash(self) -> str:
        """Hash of the full serialized document (provenance)."""
        return hashlib.sha256(serialize_scenario(self).encode("utf-8")).hexdigest()[:16]

    def stream_key(self) -> int:
        """
        64-bit key over the data-generating fields only, so changing n_sims
        or the imputation count never changes the simulated trials.
        """
        payload = self.model_dump(
            mode="json",
            include={
                "n_per_arm", "active", "control", "disc", "withdrawal_rate",
                "rho", "omega", "null", "copula", "withdrawal_mode",
            },
        )
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def _truthy(v: Any) -> bool:
    if isinstance(v, str):
        return v.strip().lower() in ("1", "true", "yes", "on")
    return bool(v)


# ---------------------------------------------------------------------------
# Document format
# ---------------------------------------------------------------------------

SCALAR_KEYS = (
    "name", "n_per_arm", "n_sims", "n_imputations", "master_seed", "rho",
    "omega", "withdrawal_rate", "null", "copula", "withdrawal_mode",
)
LIST_KEYS = (
    "response.active.on", "response.active.off",
    "response.control.on", "response.control.off",
    "disc.active", "disc.control",
)
REQUIRED_KEYS = ("n_per_arm", "withdrawal_rate") + LIST_KEYS

# pydantic error locations -> document keys
_LOC_TO_KEY = {
    ("active", "on_rates"): "response.active.on",
    ("active", "off_rates"): "response.active.off",
    ("control", "on_rates"): "response.control.on",
    ("control", "off_rates"): "response.control.off",
    ("disc", "active"): "disc.active",
    ("disc", "control"): "disc.control",
}


def _split_list(key: str, raw: Optional[str]) -> List[str]:
    if raw is None or not raw.strip():
        raise ScenarioError(f"schema violation: key '{key}' needs a comma-separated list")
    return [x.strip() for x in raw.split(",") if x.strip()]


def _describe(err: Dict[str, Any]) -> str:
    loc = tuple(str(x) for x in err.get("loc", ()))
    key = None
    for n in (2, 1):
        if loc[:n] in _LOC_TO_KEY:
            key = _LOC_TO_KEY[loc[:n]]
            break
    if key is None:
        key = ".".join(loc) if loc else "scenario"
    return f"{key}: {err.get('msg', 'invalid')}"


def build_scenario(values: Dict[str, Any]) -> ScenarioSpec:
    """Validate a nested mapping into a ScenarioSpec, converting errors."""
    try:
        return ScenarioSpec.model_validate(values)
    except ValidationError as e:
        checks = "; ".join(_describe(err) for err in e.errors())
        raise ScenarioError(f"invariant violation: {checks}") from e


def load_scenario(config_text: str) -> ScenarioSpec:
    """
    Parse and validate a scenario document.

    Args:
        config_text: flat `key = value` document with dotted section names

    Returns:
        validated ScenarioSpec with defaults applied

    Raises:
        ScenarioError: unknown/missing key (schema) or failed invariant
    """
    raw = dotenv_values(stream=io.StringIO(config_text), interpolate=False)
    known = set(SCALAR_KEYS) | set(LIST_KEYS)
    for key in raw:
        if key not in known:
            raise ScenarioError(f"schema violation: unknown key '{key}'")
    for key in REQUIRED_KEYS:
        if key not in raw:
            raise ScenarioError(f"schema violation: missing key '{key}'")

    values: Dict[str, Any] = {}
    for key in SCALAR_KEYS:
        if key in raw:
            v = raw[key]
            if v is None or v.strip() == "":
                raise ScenarioError(f"schema violation: key '{key}' has no value")
            values[key] = v.strip()

    values["active"] = {
        "arm": Arm.ACTIVE,
        "on_rates": _split_list("response.active.on", raw.get("response.active.on")),
        "off_rates": _split_list("response.active.off", raw.get("response.active.off")),
    }
    values["control"] = {
        "arm": Arm.CONTROL,
        "on_rates": _split_list("response.control.on", raw.get("response.control.on")),
        "off_rates": _split_list("response.control.off", raw.get("response.control.off")),
    }
    values["disc"] = {
        "active": _split_list("disc.active", raw.get("disc.active")),
        "control": _split_list("disc.control", raw.get("disc.control")),
    }
    return build_scenario(values)


def load_scenario_file(path: Union[str, Path]) -> ScenarioSpec:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ScenarioError(f"cannot read scenario file {p}: {e}") from e
    spec = load_scenario(text)
    logger.debug(f"loaded scenario file={p} name={spec.name}")
    return spec


def _fmt_list(xs: Tuple[float, ...]) -> str:
    return ", ".join(repr(float(x)) for x in xs)


def serialize_scenario(spec: ScenarioSpec) -> str:
    """Write a ScenarioSpec in the document format read by load_scenario()."""
    lines = [
        f"name = {spec.name}",
        f"n_per_arm = {spec.n_per_arm}",
        f"n_sims = {spec.n_sims}",
        f"n_imputations = {spec.n_imputations}",
        f"master_seed = {spec.master_seed}",
        f"rho = {spec.rho!r}",
        f"omega = {spec.omega!r}",
        f"withdrawal_rate = {spec.withdrawal_rate!r}",
        f"null = {'true' if spec.null else 'false'}",
        f"copula = {spec.copula.value}",
        f"withdrawal_mode = {spec.withdrawal_mode.value}",
        f"response.active.on = {_fmt_list(spec.active.on_rates)}",
        f"response.active.off = {_fmt_list(spec.active.off_rates)}",
        f"response.control.on = {_fmt_list(spec.control.on_rates)}",
        f"response.control.off = {_fmt_list(spec.control.off_rates)}",
        f"disc.active = {_fmt_list(spec.disc.active)}",
        f"disc.control = {_fmt_list(spec.disc.control)}",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

# (active on, active off, control on, control off)
_RATES: Dict[str, Tuple[Tuple[float, ...], ...]] = {
    "base": (
        (0.3, 0.35, 0.4, 0.45), (0.35, 0.25, 0.15),
        (0.3, 0.3, 0.3, 0.3), (0.3, 0.225, 0.15),
    ),
    "stress-high": (
        (0.8, 0.85, 0.875, 0.9), (0.8, 0.6, 0.4),
        (0.8, 0.8, 0.8, 0.8), (0.7, 0.55, 0.4),
    ),
    # high rates with the off-treatment response back at the 0.8 baseline by visit 3
    "stress-high-return": (
        (0.8, 0.85, 0.875, 0.9), (0.8, 0.8, 0.8),
        (0.8, 0.8, 0.8, 0.8), (0.7, 0.75, 0.8),
    ),
    "stress-medium": (
        (0.5, 0.55, 0.6, 0.7), (0.5, 0.4, 0.25),
        (0.5, 0.5, 0.5, 0.5), (0.45, 0.375, 0.25),
    ),
    "stress-low": (
        (0.1, 0.125, 0.15, 0.2), (0.1, 0.08, 0.05),
        (0.1, 0.1, 0.1, 0.1), (0.09, 0.075, 0.05),
    ),
}

# headline discontinuation % -> per-visit split (more discontinuations earlier)
DISC_SPLITS: Dict[int, Tuple[float, float, float]] = {
    10: (0.05, 0.03, 0.02),
    20: (0.10, 0.06, 0.04),
    30: (0.15, 0.09, 0.06),
}

DISC_SCENARIOS: Tuple[Tuple[int, int], ...] = ((10, 10), (20, 20), (30, 30), (30, 20))
WITHDRAWAL_STUDY1 = (30, 40, 50, 60, 70)
WITHDRAWAL_STUDY2 = (30, 40, 50)
STUDY2_SIZES = (50, 100, 500)
SMALL_SAMPLE_SIZE = 2000
STRESS_LEVELS = ("high", "medium", "low")
STRESS_RETURN = "stress-high-return"


def _disc_tag(active_pct: int, control_pct: int) -> str:
    return f"disc{active_pct}a{control_pct}c"


def _make_preset(
    name: str,
    family: str,
    disc: Tuple[int, int],
    withdrawal_pct: int,
    n_per_arm: int = 250,
    null: bool = False,
) -> ScenarioSpec:
    a_on, a_off, c_on, c_off = _RATES[family]
    return build_scenario({
        "name": name,
        "n_per_arm": n_per_arm,
        "active": {"arm": Arm.ACTIVE, "on_rates": a_on, "off_rates": a_off},
        "control": {"arm": Arm.CONTROL, "on_rates": c_on, "off_rates": c_off},
        "disc": {"active": DISC_SPLITS[disc[0]], "control": DISC_SPLITS[disc[1]]},
        "withdrawal_rate": withdrawal_pct / 100.0,
        "null": null,
    })


def _preset_table() -> Dict[str, Tuple[str, Tuple[int, int], int, int, bool]]:
    table: Dict[str, Tuple[str, Tuple[int, int], int, int, bool]] = {}

    def add(name: str, family: str, disc: Tuple[int, int], w: int, n: int) -> None:
        table[name] = (family, disc, w, n, False)
        table[f"{name}-null"] = (family, disc, w, n, True)

    for disc in DISC_SCENARIOS:
        for w in WITHDRAWAL_STUDY1:
            add(f"base-{_disc_tag(*disc)}-w{w}", "base", disc, w, 250)
    for n in STUDY2_SIZES:
        for w in WITHDRAWAL_STUDY2:
            add(f"base-{_disc_tag(30, 20)}-w{w}-n{n}", "base", (30, 20), w, n)
    for w in WITHDRAWAL_STUDY2:
        name = f"base-{_disc_tag(30, 20)}-w{w}-n{SMALL_SAMPLE_SIZE}"
        table[name] = ("base", (30, 20), w, SMALL_SAMPLE_SIZE, False)
    for level in STRESS_LEVELS:
        for w in WITHDRAWAL_STUDY1:
            add(f"stress-{level}-w{w}", f"stress-{level}", (30, 20), w, 250)
    for w in WITHDRAWAL_STUDY1:
        add(f"{STRESS_RETURN}-w{w}", STRESS_RETURN, (30, 20), w, 250)
    return table


_PRESETS = _preset_table()


def list_presets() -> List[str]:
    return list(_PRESETS)


def preset(name: str) -> ScenarioSpec:
    """
    Build a named preset.

    Raises:
        ScenarioError: unknown preset name
    """
    entry = _PRESETS.get(name)
    if entry is None:
        raise ScenarioError(f"unknown preset '{name}' (see `rdsim preset --list`)")
    family, disc, w, n, null = entry
    return _make_preset(name, family, disc, w, n_per_arm=n, null=null)


GRIDS: Dict[str, List[str]] = {
    "study1": [
        f"base-{_disc_tag(*d)}-w{w}" for d in DISC_SCENARIOS for w in WITHDRAWAL_STUDY1
    ],
    "study2": [
        f"base-{_disc_tag(30, 20)}-w{w}-n{n}" for n in STUDY2_SIZES for w in WITHDRAWAL_STUDY2
    ],
    "small-sample": [
        f"base-{_disc_tag(30, 20)}-w{w}-n{SMALL_SAMPLE_SIZE}" for w in WITHDRAWAL_STUDY2
    ],
    "stress": [
        f"stress-{lvl}-w{w}" for lvl in STRESS_LEVELS for w in WITHDRAWAL_STUDY1
    ],
    "stress-return": [f"{STRESS_RETURN}-w{w}" for w in WITHDRAWAL_STUDY1],
}
for _g in ("study1", "study2", "stress", "stress-return"):
    GRIDS[f"{_g}-null"] = [f"{x}-null" for x in GRIDS[_g]]


def grid(name: str) -> List[ScenarioSpec]:
    if name not in GRIDS:
        raise ScenarioError(f"unknown grid '{name}', expected one of {sorted(GRIDS)}")
    return [preset(x) for x in GRIDS[name]]
