"""
Shared fixtures for the rdmi test suite.
"""
from typing import Callable

import numpy as np
import pytest

from app.services.rdmi.dgm import Provenance, TrialDataset
from app.services.rdmi.scenario import ScenarioSpec, build_scenario, preset


@pytest.fixture
def make_dataset() -> Callable[..., TrialDataset]:
    """Build a TrialDataset from explicit arrays (Active rows first)."""

    def _make(
        arm,
        y_on,
        y_off=None,
        ie_time=None,
        observed=None,
        replicate: int = 0,
    ) -> TrialDataset:
        arm = np.asarray(arm, dtype=np.int8)
        n = arm.shape[0]
        y_on = np.asarray(y_on, dtype=np.int8)
        y_off = np.zeros((n, 3), dtype=np.int8) if y_off is None else np.asarray(y_off, dtype=np.int8)
        ie_time = np.zeros(n, dtype=np.int8) if ie_time is None else np.asarray(ie_time, dtype=np.int8)
        observed = np.ones((n, 4), dtype=bool) if observed is None else np.asarray(observed, dtype=bool)
        return TrialDataset(
            arm=arm,
            patient_id=np.arange(n),
            y_on=y_on,
            y_off=y_off,
            ie_time=ie_time,
            observed=observed,
            provenance=Provenance(scenario="handmade", spec_hash="-", replicate=replicate, master_seed=0),
        )

    return _make


@pytest.fixture
def small_spec() -> Callable[..., ScenarioSpec]:
    """A preset shrunk for fast tests; keyword overrides replace fields."""

    def _make(name: str = "base-disc30a20c-w50", **overrides) -> ScenarioSpec:
        values = preset(name).model_dump()
        values.update({"n_per_arm": 80, "n_sims": 4, "n_imputations": 3})
        values.update(overrides)
        return build_scenario(values)

    return _make


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240917)
