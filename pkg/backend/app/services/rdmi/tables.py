"""
Delimited-text output tables built from SummaryRows.
"""
from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd

from shared.utils import get_logger

from .impute import ModelKind
from .metrics import SUMMARY_COLUMNS, SummaryRow
from .scenario import Arm, ScenarioSpec

logger = get_logger("rdmi-tables")

SUMMARY_FILE = "summary.csv"
CONVERGENCE_FILE = "table_convergence.csv"
FALSE_POSITIVE_FILE = "table_false_positive.csv"
MODSE_FILE = "table_modse.csv"
FLOAT_FORMAT = "%.10g"


def summary_frame(summaries: Sequence[SummaryRow]) -> pd.DataFrame:
    """Long-format plot data, one row per scenario x model."""
    return pd.DataFrame([s.as_dict() for s in summaries], columns=list(SUMMARY_COLUMNS))


def _model_order(summaries: Sequence[SummaryRow]) -> List[str]:
    present = {s.model for s in summaries}
    return [k.value for k in ModelKind if k.value in present]


def _scenario_order(summaries: Sequence[SummaryRow]) -> List[str]:
    seen: Dict[str, None] = {}
    for s in summaries:
        seen.setdefault(s.scenario, None)
    return list(seen)


def _pivot(summaries: Sequence[SummaryRow], cell) -> pd.DataFrame:
    models = _model_order(summaries)
    by_key = {(s.scenario, s.model): s for s in summaries}
    rows = []
    for name in _scenario_order(summaries):
        row: Dict[str, object] = {"scenario": name}
        for m in models:
            s = by_key.get((name, m))
            row[ModelKind(m).label] = cell(s) if s is not None else ""
        rows.append(row)
    return pd.DataFrame(rows, columns=["scenario"] + [ModelKind(m).label for m in models])


def _fmt_pct(value: Optional[float], digits: int = 2) -> str:
    return "" if value is None else f"{value:.{digits}f}"


def convergence_table(summaries: Sequence[SummaryRow]) -> pd.DataFrame:
    """Number and percentage of replicates fitted, e.g. `6000 (100.0%)`."""
    return _pivot(summaries, lambda s: f"{s.n_fitted} ({s.fitted_pct:.1f}%)")


def modse_table(summaries: Sequence[SummaryRow]) -> pd.DataFrame:
    return _pivot(summaries, lambda s: _fmt_pct(s.modse_rel_err_pct))


def false_positive_table(
    summaries: Sequence[SummaryRow],
    specs: Dict[str, ScenarioSpec],
) -> pd.DataFrame:
    """Null scenarios only, one row per (discontinuation, withdrawal, N)."""
    null_rows = [s for s in summaries if s.null]
    models = _model_order(null_rows)
    by_key = {(s.scenario, s.model): s for s in null_rows}
    rows = []
    for name in _scenario_order(null_rows):
        spec = specs[name]
        row: Dict[str, object] = {
            "scenario": name,
            "discontinuation": (
                f"{round(100 * spec.disc.headline(Arm.ACTIVE))}/"
                f"{round(100 * spec.disc.headline(Arm.CONTROL))}"
            ),
            "withdrawal_pct": round(100 * spec.withdrawal_rate),
            "n_per_arm": spec.n_per_arm,
        }
        for m in models:
            s = by_key.get((name, m))
            row[ModelKind(m).label] = _fmt_pct(s.false_positive_pct) if s is not None else ""
        rows.append(row)
    columns = ["scenario", "discontinuation", "withdrawal_pct", "n_per_arm"]
    return pd.DataFrame(rows, columns=columns + [ModelKind(m).label for m in models])


def emit_tables(
    summaries: Sequence[SummaryRow],
    out_dir: Union[str, Path],
    specs: Dict[str, ScenarioSpec],
) -> Dict[str, Path]:
    """
    Write the summary and table files into out_dir.

    Returns:
        mapping of table name to written path
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: Dict[str, Path] = {}

    frames = {
        SUMMARY_FILE: summary_frame(summaries),
        CONVERGENCE_FILE: convergence_table(summaries),
        MODSE_FILE: modse_table(summaries),
        FALSE_POSITIVE_FILE: false_positive_table(summaries, specs),
    }
    for filename, frame in frames.items():
        path = out / filename
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        written[filename] = path
        logger.info(f"wrote table file={path} rows={len(frame)}")
    return written
