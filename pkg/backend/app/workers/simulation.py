"""
Simulation Worker - 模拟运行工作节点

职责：按运行清单（RunManifest）对每个场景 × 重复执行
simulate_trial → impute_sequential → analyze → rubin_pool，
把逐重复结果写入 replicates.csv（可断点续跑），最后汇总成表。
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import pandas as pd

from shared.config import settings
from shared.utils import add_file_sink, get_logger, remove_sink

from app.services.rdmi.dgm import simulate_trial, trial_streams
from app.services.rdmi.errors import ManifestError
from app.services.rdmi.glm import GlmError
from app.services.rdmi.impute import ImputationError, MiModel, ModelKind, impute_sequential
from app.services.rdmi.metrics import (
    REPLICATE_COLUMNS,
    RepResult,
    SummaryRow,
    TrueEffect,
    result_from_row,
    result_to_row,
    summarize,
    true_log_or,
)
from app.services.rdmi.pool import PoolingError, pool_completed
from app.services.rdmi.scenario import ScenarioSpec, serialize_scenario
from app.services.rdmi.tables import emit_tables

logger = get_logger("simulation-worker")

REPLICATES_FILE = "replicates.csv"
TRUTH_FILE = "truth.csv"
MANIFEST_FILE = "manifest.json"
RUN_LOG_FILE = "run.log"
REPLICATE_FLOAT_FORMAT = "%.17g"
_FLOAT_COLUMNS = ("point", "se", "df", "ci_low", "ci_high", "p_value", "within_var", "between_var")


@dataclass
class RunManifest:
    """
    What to run and where. FULL is always added (first) as the comparator.

    Raises:
        ManifestError: no scenarios, no models, duplicate scenario names
    """

    scenarios: List[ScenarioSpec]
    models: List[MiModel]
    out_dir: Path
    workers: int = field(default_factory=lambda: settings.RDSIM_WORKERS)
    resume: bool = False
    checkpoint_every: int = field(default_factory=lambda: settings.RDSIM_CHECKPOINT_EVERY)
    oracle_patients_per_arm: Optional[int] = None
    oracle_chunk: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.scenarios:
            raise ManifestError("run manifest has no scenarios")
        if not self.models:
            raise ManifestError("run manifest has no models")
        names = [s.name for s in self.scenarios]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ManifestError(f"duplicate scenario names: {dupes}")
        kinds = [m.kind for m in self.models]
        ordered = [k for k in ModelKind if k in kinds]
        if ModelKind.FULL not in ordered:
            ordered.insert(0, ModelKind.FULL)
        self.models = [MiModel(k) for k in ordered]
        self.out_dir = Path(self.out_dir)
        if self.workers < 1:
            raise ManifestError(f"worker count must be positive, got {self.workers}")
        if self.checkpoint_every < 1:
            raise ManifestError("checkpoint interval must be positive")

    @classmethod
    def parse_models(cls, text: Optional[str]) -> List[MiModel]:
        """Comma-separated model names; None means every model."""
        if text is None:
            return [MiModel(k) for k in ModelKind]
        names = [x for x in (p.strip() for p in text.split(",")) if x]
        if not names:
            raise ManifestError("empty model list")
        try:
            return [MiModel.of(x) for x in names]
        except ValueError as e:
            raise ManifestError(str(e)) from e

    @property
    def model_kinds(self) -> Tuple[ModelKind, ...]:
        return tuple(m.kind for m in self.models)

    def total_tasks(self) -> int:
        return sum(s.n_sims for s in self.scenarios)


@dataclass(frozen=True)
class RunOutcome:
    out_dir: Path
    summaries: List[SummaryRow]
    truths: Dict[str, TrueEffect]
    files: Dict[str, Path]
    n_tasks_run: int
    n_tasks_resumed: int


def evaluate_replicate(
    spec: ScenarioSpec,
    replicate: int,
    models: Sequence[ModelKind],
) -> List[RepResult]:
    """
    One replicate: simulate the trial once and score every model on it.

    A model that cannot be fitted on this trial is recorded as excluded.
    """
    data = simulate_trial(spec, replicate)
    streams = trial_streams(spec, replicate).child("impute")
    out: List[RepResult] = []
    for kind in models:
        try:
            completed = impute_sequential(data, MiModel(kind), spec.n_imputations, streams)
            estimate = pool_completed(completed)
        except (ImputationError, GlmError, PoolingError) as e:
            reason = getattr(e, "reason", None) or f"{type(e).__name__}: {e}"
            logger.debug(
                f"excluded scenario={spec.name} replicate={replicate} model={kind.value} reason={reason}"
            )
            out.append(RepResult.excluded(spec.name, replicate, kind, reason))
            continue
        out.append(RepResult(scenario=spec.name, replicate=replicate, model=kind, estimate=estimate))
    return out


def _evaluate_task(task: Tuple[ScenarioSpec, int, Tuple[ModelKind, ...]]) -> List[RepResult]:
    spec, replicate, models = task
    return evaluate_replicate(spec, replicate, models)


def _parse_float(text: str) -> float:
    # float() reads %.17g text back to the exact double; pd.to_numeric may not
    return float(text) if text else math.nan


def read_replicates(path: Union[str, Path]) -> pd.DataFrame:
    """Read replicates.csv back with the numeric columns restored bit for bit."""
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in REPLICATE_COLUMNS if c not in df.columns]
    if missing:
        raise ManifestError(f"{path} is not a replicate log (missing columns {missing})")
    for col in _FLOAT_COLUMNS:
        df[col] = df[col].map(_parse_float).astype(float)
    for col in ("replicate", "m_used", "significant"):
        df[col] = df[col].astype(int)
    return df[list(REPLICATE_COLUMNS)]


def write_replicates(path: Path, results: Iterable[RepResult], append: bool) -> None:
    frame = pd.DataFrame([result_to_row(r) for r in results], columns=list(REPLICATE_COLUMNS))
    frame.to_csv(
        path,
        mode="a" if append else "w",
        header=not append,
        index=False,
        float_format=REPLICATE_FLOAT_FORMAT,
        lineterminator="\n",
    )


class SimulationWorker:
    """模拟运行工作器"""

    def __init__(self, manifest: RunManifest):
        self.manifest = manifest
        self.out_dir = manifest.out_dir
        self.replicates_path = self.out_dir / REPLICATES_FILE

    def run(self) -> RunOutcome:
        m = self.manifest
        self.out_dir.mkdir(parents=True, exist_ok=True)
        sink = add_file_sink(self.out_dir / RUN_LOG_FILE)
        try:
            logger.info(
                f"run started scenarios={len(m.scenarios)} models={[k.value for k in m.model_kinds]} "
                f"workers={m.workers} resume={m.resume} out={self.out_dir}"
            )
            done = self._prepare_log()
            tasks = [
                (spec, r, m.model_kinds)
                for spec in m.scenarios
                for r in range(spec.n_sims)
                if (spec.name, r) not in done
            ]
            self._run_tasks(tasks)

            results = self._load_results()
            truths = {spec.name: self._truth(spec) for spec in m.scenarios}
            summaries = self._summarize(results, truths)

            files = emit_tables(summaries, self.out_dir, {s.name: s for s in m.scenarios})
            files[REPLICATES_FILE] = self.replicates_path
            files[TRUTH_FILE] = self._write_truth(truths)
            files[MANIFEST_FILE] = self._write_manifest(truths)
            logger.info(f"run finished tasks_run={len(tasks)} tasks_resumed={len(done)} out={self.out_dir}")
            return RunOutcome(
                out_dir=self.out_dir,
                summaries=summaries,
                truths=truths,
                files=files,
                n_tasks_run=len(tasks),
                n_tasks_resumed=len(done),
            )
        finally:
            remove_sink(sink)

    def _prepare_log(self) -> Set[Tuple[str, int]]:
        """
        Start a fresh replicate log, or on resume keep only replicates whose
        every model row was written and rewrite the log with those rows.
        """
        if not self.manifest.resume or not self.replicates_path.exists():
            write_replicates(self.replicates_path, [], append=False)
            return set()

        df = read_replicates(self.replicates_path)
        wanted = {s.name: s.n_sims for s in self.manifest.scenarios}
        kinds = {k.value for k in self.manifest.model_kinds}
        df = df[df["scenario"].isin(list(wanted)) & df["model"].isin(list(kinds))]
        df = df[[r < wanted[s] for s, r in zip(df["scenario"], df["replicate"])]]
        df = df.drop_duplicates(subset=["scenario", "replicate", "model"], keep="first")
        per_task = df.groupby(["scenario", "replicate"])["model"].nunique()
        done = {(str(s), int(r)) for (s, r), n in per_task.items() if n == len(kinds)}
        keep = [(s, int(r)) in done for s, r in zip(df["scenario"], df["replicate"])]
        results = [result_from_row(row) for row in df[keep].to_dict("records")]
        write_replicates(self.replicates_path, results, append=False)
        logger.info(f"resuming with completed_replicates={len(done)} from {self.replicates_path}")
        return done

    def _run_tasks(self, tasks: List[Tuple[ScenarioSpec, int, Tuple[ModelKind, ...]]]) -> None:
        m = self.manifest
        total = len(tasks)
        if not total:
            return
        executor = ProcessPoolExecutor(max_workers=m.workers) if m.workers > 1 else None
        try:
            done = 0
            excluded = 0
            for start in range(0, total, m.checkpoint_every):
                chunk = tasks[start: start + m.checkpoint_every]
                if executor is None:
                    batches = [_evaluate_task(t) for t in chunk]
                else:
                    batches = list(executor.map(_evaluate_task, chunk))
                flat = [r for batch in batches for r in batch]
                write_replicates(self.replicates_path, flat, append=True)
                done += len(chunk)
                excluded += sum(not r.fitted for r in flat)
                logger.info(f"checkpoint done={done}/{total} excluded_results={excluded}")
        finally:
            if executor is not None:
                executor.shutdown()

    def _load_results(self) -> Dict[Tuple[str, ModelKind], List[RepResult]]:
        df = read_replicates(self.replicates_path)
        grouped: Dict[Tuple[str, ModelKind], List[RepResult]] = {}
        for row in df.to_dict("records"):
            r = result_from_row(row)
            grouped.setdefault((r.scenario, r.model), []).append(r)
        for rs in grouped.values():
            rs.sort(key=lambda r: r.replicate)
        return grouped

    def _truth(self, spec: ScenarioSpec) -> TrueEffect:
        m = self.manifest
        return true_log_or(spec, patients_per_arm=m.oracle_patients_per_arm, chunk=m.oracle_chunk)

    def _summarize(
        self,
        results: Dict[Tuple[str, ModelKind], List[RepResult]],
        truths: Dict[str, TrueEffect],
    ) -> List[SummaryRow]:
        summaries: List[SummaryRow] = []
        for spec in self.manifest.scenarios:
            full = results.get((spec.name, ModelKind.FULL), [])
            for kind in self.manifest.model_kinds:
                rs = results.get((spec.name, kind), [])
                if len(rs) != spec.n_sims:
                    raise ManifestError(
                        f"replicate log has {len(rs)} rows for scenario={spec.name} "
                        f"model={kind.value}, expected {spec.n_sims}"
                    )
                summaries.append(summarize(rs, full, truths[spec.name], spec))
        return summaries

    def _write_truth(self, truths: Dict[str, TrueEffect]) -> Path:
        path = self.out_dir / TRUTH_FILE
        rows = [
            {
                "scenario": name,
                "theta_true": t.value,
                "oracle_mcse": t.mcse,
                "oracle_patients_per_arm": t.patients_per_arm,
                "oracle_seed": t.seed,
            }
            for name, t in truths.items()
        ]
        pd.DataFrame(rows).to_csv(path, index=False, float_format=REPLICATE_FLOAT_FORMAT, lineterminator="\n")
        return path

    def _write_manifest(self, truths: Dict[str, TrueEffect]) -> Path:
        m = self.manifest
        doc = {
            "project": settings.PROJECT_NAME,
            "version": settings.VERSION,
            "models": [k.value for k in m.model_kinds],
            "workers": m.workers,
            "resume": m.resume,
            "checkpoint_every": m.checkpoint_every,
            "oracle": {
                "patients_per_arm": m.oracle_patients_per_arm or settings.ORACLE_PATIENTS_PER_ARM,
                "chunk": m.oracle_chunk or settings.ORACLE_CHUNK,
                "seed": settings.ORACLE_SEED,
            },
            "scenarios": [
                {
                    "name": s.name,
                    "master_seed": s.master_seed,
                    "stream_key": str(s.stream_key()),
                    "spec_hash": s.spec_hash(),
                    "n_sims": s.n_sims,
                    "n_imputations": s.n_imputations,
                    "theta_true": truths[s.name].value,
                    "document": serialize_scenario(s),
                }
                for s in m.scenarios
            ],
        }
        path = self.out_dir / MANIFEST_FILE
        path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        return path
