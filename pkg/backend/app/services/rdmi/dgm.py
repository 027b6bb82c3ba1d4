"""
Data generation for one simulated trial.

Steps per arm:
1. counterfactual on/off-treatment binary outcomes from a Gaussian copula;
2. intercurrent events (treatment discontinuation) chosen by ranking
   kappa = logit(v) + omega * y_on[j-1] among patients still on treatment,
   lowest first, so prior non-responders discontinue preferentially;
3. study withdrawals among IE patients, ranked on fresh uniforms (MCAR given
   the IE), masking the policy outcome from the IE visit onward. In
   trial_rank mode this step ranks both arms together.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import cholesky
from scipy.special import logit
from scipy.stats import norm

from shared.utils import get_logger

from .errors import DgmError
from .scenario import (
    N_VISITS,
    Arm,
    CopulaStructure,
    ScenarioSpec,
    WithdrawalMode,
    round_half_up,
)
from .streams import StreamFactory

logger = get_logger("rdmi-dgm")

LATENT_DIM = 7  # baseline + 3 on-treatment + 3 off-treatment
PATTERN_LABELS = {0: "never", 1: "disc@1", 2: "disc@2", 3: "disc@3"}


@dataclass(frozen=True)
class PatientRecord:
    patient_id: int
    arm: Arm
    y_on: Tuple[int, int, int, int]
    y_off: Tuple[int, int, int]
    ie_time: Optional[int]
    ie_indicators: Tuple[int, int, int]
    pattern: str
    policy_outcome: Tuple[int, int, int, int]
    observed: Tuple[bool, bool, bool, bool]


@dataclass(frozen=True)
class Provenance:
    scenario: str
    spec_hash: str
    replicate: int
    master_seed: int


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """
    Columnar trial: Active patients first, then Control.

    ie_time is 0 for patients who never discontinue. observed[:, 0] is
    always True.
    """

    arm: np.ndarray  # int8, 1 = Active
    patient_id: np.ndarray
    y_on: np.ndarray  # (n, 4)
    y_off: np.ndarray  # (n, 3), column 0 = visit 1
    ie_time: np.ndarray  # (n,)
    observed: np.ndarray  # (n, 4) bool
    provenance: Provenance

    @property
    def n(self) -> int:
        return int(self.arm.shape[0])

    def arm_mask(self, arm: Arm) -> np.ndarray:
        return self.arm == arm.code

    @property
    def ie_indicators(self) -> np.ndarray:
        """D_j for visits 1..3: 1 iff the IE happened at or before visit j."""
        visits = np.arange(1, N_VISITS + 1)
        t = self.ie_time[:, None]
        return ((t > 0) & (t <= visits[None, :])).astype(np.int8)

    @property
    def y_policy(self) -> np.ndarray:
        return policy_outcomes(self.y_on, self.y_off, self.ie_time)

    @property
    def y_observed(self) -> np.ndarray:
        """Policy outcomes with -1 where missing."""
        y = self.y_policy.copy()
        y[~self.observed] = -1
        return y

    def record(self, i: int) -> PatientRecord:
        t = int(self.ie_time[i])
        return PatientRecord(
            patient_id=int(self.patient_id[i]),
            arm=Arm.ACTIVE if self.arm[i] == 1 else Arm.CONTROL,
            y_on=tuple(int(x) for x in self.y_on[i]),
            y_off=tuple(int(x) for x in self.y_off[i]),
            ie_time=t or None,
            ie_indicators=tuple(int(x) for x in self.ie_indicators[i]),
            pattern=PATTERN_LABELS[t],
            policy_outcome=tuple(int(x) for x in self.y_policy[i]),
            observed=tuple(bool(x) for x in self.observed[i]),
        )

    def records(self) -> Iterator[PatientRecord]:
        for i in range(self.n):
            yield self.record(i)

    def same_as(self, other: "TrialDataset") -> bool:
        return (
            np.array_equal(self.arm, other.arm)
            and np.array_equal(self.y_on, other.y_on)
            and np.array_equal(self.y_off, other.y_off)
            and np.array_equal(self.ie_time, other.ie_time)
            and np.array_equal(self.observed, other.observed)
        )

    def to_frame(self, y_policy: Optional[np.ndarray] = None) -> pd.DataFrame:
        """One row per patient-visit, in the dump column order."""
        n = self.n
        y_pol = self.y_policy if y_policy is None else y_policy
        visits = np.tile(np.arange(N_VISITS + 1), n)
        rows = np.repeat(np.arange(n), N_VISITS + 1)
        y_off = np.full((n, N_VISITS + 1), -1, dtype=np.int64)
        y_off[:, 1:] = self.y_off
        d = np.zeros((n, N_VISITS + 1), dtype=np.int8)
        d[:, 1:] = self.ie_indicators
        obs = self.observed.reshape(-1)
        policy = pd.array(y_pol.reshape(-1).astype(np.int64), dtype="Int64")
        if y_policy is None:
            policy[~obs] = pd.NA
        y_off_col = pd.array(y_off.reshape(-1), dtype="Int64")
        y_off_col[visits == 0] = pd.NA
        return pd.DataFrame({
            "sim": self.provenance.replicate,
            "arm": np.where(self.arm[rows] == 1, Arm.ACTIVE.value, Arm.CONTROL.value),
            "id": self.patient_id[rows],
            "visit": visits,
            "y_on": self.y_on.reshape(-1),
            "y_off": y_off_col,
            "d": d.reshape(-1),
            "pattern": [PATTERN_LABELS[int(t)] for t in self.ie_time[rows]],
            "y_policy": policy,
            "observed": obs.astype(np.int8),
        })


def policy_outcomes(y_on: np.ndarray, y_off: np.ndarray, ie_time: np.ndarray) -> np.ndarray:
    """Y_j = y_on before the IE visit, y_off at and after it."""
    y = np.asarray(y_on, dtype=np.int8).copy()
    visits = np.arange(1, N_VISITS + 1)
    t = np.asarray(ie_time)[:, None]
    off = (t > 0) & (t <= visits[None, :])
    y[:, 1:] = np.where(off, y_off, y[:, 1:])
    return y


def latent_correlation(rho: float, structure: CopulaStructure) -> np.ndarray:
    corr = np.full((LATENT_DIM, LATENT_DIM), rho, dtype=float)
    if structure is CopulaStructure.BLOCK:
        corr[:4, 4:] = 0.0
        corr[4:, :4] = 0.0
    np.fill_diagonal(corr, 1.0)
    return corr


def gen_counterfactuals(
    spec: ScenarioSpec,
    arm: Arm,
    rng: np.random.Generator,
    n: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw counterfactual outcomes for one arm.

    Each patient gets a 7-dimensional standard normal with correlation rho,
    mapped through the normal CDF; an outcome is 1 iff U <= p.

    Returns:
        (y_on (n, 4), y_off (n, 3)) as int8
    """
    n = spec.n_per_arm if n is None else int(n)
    sched = spec.schedule(arm)
    chol = cholesky(latent_correlation(spec.rho, spec.copula), lower=True)
    z = rng.standard_normal((n, LATENT_DIM)) @ chol.T
    u = norm.cdf(z)
    y_on = (u[:, :4] <= np.asarray(sched.on_rates)[None, :]).astype(np.int8)
    y_off = (u[:, 4:] <= np.asarray(sched.off_rates)[None, :]).astype(np.int8)
    return y_on, y_off


def select_ies(
    y_on: np.ndarray,
    targets: Tuple[int, int, int],
    omega: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Assign IE times by ranking kappa among patients still on treatment.

    One v_i per patient is shared by all visits; kappa is recomputed each
    visit from the previous on-treatment outcome. A prior response raises
    kappa, so with omega > 0 non-responders are selected first.

    Returns:
        ie_time (n,), 0 = no IE
    """
    n = y_on.shape[0]
    if sum(targets) > n:
        raise DgmError(f"infeasible schedule: {sum(targets)} IEs requested for {n} patients")
    logit_v = logit(rng.random(n))
    ie_time = np.zeros(n, dtype=np.int8)
    on = np.ones(n, dtype=bool)
    for j, k in enumerate(targets, start=1):
        if k <= 0:
            continue
        cand = np.flatnonzero(on)
        if k > cand.size:
            raise DgmError(f"infeasible schedule at visit {j}: {k} IEs, {cand.size} on treatment")
        kappa = logit_v[cand] + omega * y_on[cand, j - 1]
        chosen = cand[np.argsort(kappa, kind="stable")[:k]]
        ie_time[chosen] = j
        on[chosen] = False
    return ie_time


def select_withdrawals(
    ie_time: np.ndarray,
    withdrawal_rate: float,
    rng: np.random.Generator,
    mode: WithdrawalMode = WithdrawalMode.QUOTA,
) -> np.ndarray:
    """
    Choose which IE patients withdraw, returning the observed mask (n, 4).

    A withdrawn patient is missing from the IE visit through visit 3.

    QUOTA takes the lowest u among the visit's IE patients until the
    cumulative count reaches round(rate * IEs so far). TRIAL_RANK takes
    floor(rate * IEs at the visit) and is meant to be called once on both
    arms, so how many withdrawals land in each arm is random and a small
    pattern can be withdrawn entirely.
    """
    n = ie_time.shape[0]
    u = rng.random((n, N_VISITS))
    observed = np.ones((n, N_VISITS + 1), dtype=bool)

    taken = 0
    for j in range(1, N_VISITS + 1):
        idx = np.flatnonzero(ie_time == j)
        if mode is WithdrawalMode.QUOTA:
            cum_ie = int(np.count_nonzero((ie_time > 0) & (ie_time <= j)))
            quota = min(idx.size, max(0, round_half_up(withdrawal_rate * cum_ie) - taken))
        else:
            quota = min(idx.size, int(math.floor(withdrawal_rate * idx.size + 1e-9)))
        taken += quota
        if quota:
            chosen = idx[np.argsort(u[idx, j - 1], kind="stable")[:quota]]
            observed[chosen, j:] = False
    return observed


def trial_streams(spec: ScenarioSpec, replicate: int) -> StreamFactory:
    return StreamFactory(spec.master_seed, spec.stream_key(), int(replicate))


def simulate_arm(
    spec: ScenarioSpec,
    arm: Arm,
    streams: StreamFactory,
    n: Optional[int] = None,
    withdrawal_rate: Optional[float] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Simulate one arm. In trial_rank mode the returned mask is fully observed;
    simulate_trial() withdraws over both arms at once.
    """
    n = spec.n_per_arm if n is None else int(n)
    w = spec.withdrawal_rate if withdrawal_rate is None else withdrawal_rate
    y_on, y_off = gen_counterfactuals(spec, arm, streams("dgm", arm.value, "copula"), n=n)
    ie_time = select_ies(y_on, spec.disc.ie_targets(arm, n), spec.omega, streams("dgm", arm.value, "ie"))
    if spec.withdrawal_mode is WithdrawalMode.TRIAL_RANK:
        observed = np.ones((n, N_VISITS + 1), dtype=bool)
    else:
        observed = select_withdrawals(ie_time, w, streams("dgm", arm.value, "withdrawal"), spec.withdrawal_mode)
    return y_on, y_off, ie_time, observed


def simulate_trial(spec: ScenarioSpec, replicate_index: int) -> TrialDataset:
    """
    Simulate replicate `replicate_index` of a scenario.

    Deterministic in (master_seed, scenario, replicate_index).
    """
    if not 0 <= replicate_index < spec.n_sims:
        raise DgmError(f"replicate {replicate_index} outside 0..{spec.n_sims - 1}")
    streams = trial_streams(spec, replicate_index)
    parts = [simulate_arm(spec, arm, streams) for arm in (Arm.ACTIVE, Arm.CONTROL)]
    n = spec.n_per_arm
    ie_time = np.concatenate([p[2] for p in parts])
    if spec.withdrawal_mode is WithdrawalMode.TRIAL_RANK:
        observed = select_withdrawals(
            ie_time, spec.withdrawal_rate, streams("dgm", "trial", "withdrawal"), spec.withdrawal_mode,
        )
    else:
        observed = np.vstack([p[3] for p in parts])
    return TrialDataset(
        arm=np.concatenate([np.ones(n, dtype=np.int8), np.zeros(n, dtype=np.int8)]),
        patient_id=np.arange(2 * n),
        y_on=np.vstack([p[0] for p in parts]),
        y_off=np.vstack([p[1] for p in parts]),
        ie_time=ie_time,
        observed=observed,
        provenance=Provenance(
            scenario=spec.name,
            spec_hash=spec.spec_hash(),
            replicate=int(replicate_index),
            master_seed=spec.master_seed,
        ),
    )
