#!/usr/bin/env python3
"""
rdsim：retrieved-dropout 多重插补模拟的命令行入口。

用法（在 backend/ 目录下）：
  python -m app.tools.rdsim preset --list
  python -m app.tools.rdsim preset base-disc30a20c-w70-null
  python -m app.tools.rdsim run --preset base-disc30a20c-w70-null --sims 200 --workers 4 --out results/fp
  python -m app.tools.rdsim run --grid study1 --models cics,oics,pics --out results/study1
  python -m app.tools.rdsim run --config ../data/scenarios/base-30-20-w50.env --resume --out results/b
  python -m app.tools.rdsim varinfl --n1 175 --n2 38 --n3 37 --p1 0.45 --p2 0.15
  python -m app.tools.rdsim dump --preset base-disc20a20c-w50 --replicate 0 --model oics --out dump.csv

退出码：0 成功；2 参数或运行错误（错误信息写入日志）。
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence

# 确保可 import shared（项目根目录）
# <root>/backend/app/tools/rdsim.py -> project_root=<root>
project_root = Path(__file__).resolve().parents[3]
sys.path.insert(0, str(project_root))

import pandas as pd  # noqa: E402

from shared.config import settings  # noqa: E402
from shared.utils import get_logger  # noqa: E402

from app.services.rdmi.dgm import simulate_trial, trial_streams  # noqa: E402
from app.services.rdmi.errors import RdsimError, ScenarioError  # noqa: E402
from app.services.rdmi.impute import MiModel, ModelKind, impute_sequential  # noqa: E402
from app.services.rdmi.scenario import (  # noqa: E402
    GRIDS,
    ScenarioSpec,
    build_scenario,
    grid,
    list_presets,
    load_scenario_file,
    preset,
    serialize_scenario,
)
from app.services.rdmi.varinfl import GroupCounts, inflation_report  # noqa: E402
from app.workers.simulation import RunManifest, SimulationWorker  # noqa: E402

logger = get_logger("rdsim")

EXIT_OK = 0
EXIT_ERROR = 2


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got '{text}'") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def _with_sims(spec: ScenarioSpec, n_sims: int) -> ScenarioSpec:
    values = spec.model_dump()
    values["n_sims"] = n_sims
    return build_scenario(values)


def _resolve_scenarios(args: argparse.Namespace) -> List[ScenarioSpec]:
    specs: List[ScenarioSpec] = []
    for path in args.config or []:
        specs.append(load_scenario_file(path))
    for name in args.preset or []:
        specs.append(preset(name))
    for name in args.grid or []:
        specs.extend(grid(name))
    sims = settings.RDSIM_FULL_SCALE_SIMS if args.full_scale else args.sims
    if sims is not None:
        if sims <= 0:
            raise ScenarioError("--sims must be positive")
        specs = [_with_sims(s, sims) for s in specs]
    return specs


def cmd_run(args: argparse.Namespace) -> int:
    specs = _resolve_scenarios(args)
    manifest = RunManifest(
        scenarios=specs,
        models=RunManifest.parse_models(args.models),
        out_dir=Path(args.out or settings.RDSIM_OUTPUT_DIR),
        workers=settings.RDSIM_WORKERS if args.workers is None else args.workers,
        resume=bool(args.resume),
        oracle_patients_per_arm=args.oracle_patients,
    )
    outcome = SimulationWorker(manifest).run()
    for name, path in sorted(outcome.files.items()):
        print(f"{name}\t{path}")
    return EXIT_OK


def cmd_preset(args: argparse.Namespace) -> int:
    if args.list or not args.name:
        for name in list_presets():
            print(name)
        print("")
        print("grids: " + ", ".join(sorted(GRIDS)))
        return EXIT_OK
    sys.stdout.write(serialize_scenario(preset(args.name)))
    return EXIT_OK


def cmd_varinfl(args: argparse.Namespace) -> int:
    report = inflation_report(GroupCounts.of(args.n1, args.n2, args.n3, args.p1, args.p2))
    print(f"policy_proportion\t{report.policy_proportion:.6g}")
    print(f"full_variance\t{report.full_variance:.6g}")
    print(f"missing_variance\t{report.missing_variance:.6g}")
    print(f"absolute_increase\t{report.absolute_increase:.6g}")
    print(f"relative_increase\t{report.relative_increase:.6g}")
    return EXIT_OK


def cmd_dump(args: argparse.Namespace) -> int:
    if bool(args.preset) == bool(args.config):
        raise ScenarioError("dump needs exactly one of --preset or --config")
    spec = preset(args.preset) if args.preset else load_scenario_file(args.config)
    data = simulate_trial(spec, args.replicate)
    if args.model:
        model = MiModel.of(args.model)
        streams = trial_streams(spec, args.replicate).child("impute")
        completed = impute_sequential(data, model, spec.n_imputations, streams)
        frame = pd.concat([cd.to_frame() for cd in completed], ignore_index=True)
    else:
        frame = data.to_frame()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, lineterminator="\n")
    logger.info(f"dumped scenario={spec.name} replicate={args.replicate} model={args.model or '-'} rows={len(frame)} file={out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdsim", description="Retrieved-dropout MI simulation engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run scenarios and write summary tables")
    p_run.add_argument("--config", action="append", help="scenario document (repeatable)")
    p_run.add_argument("--preset", action="append", help="named preset (repeatable)")
    p_run.add_argument("--grid", action="append", choices=sorted(GRIDS), help="named preset grid")
    p_run.add_argument("--sims", type=int, default=None, help="override n_sims of every scenario")
    p_run.add_argument("--full-scale", action="store_true", help=f"use {settings.RDSIM_FULL_SCALE_SIMS} replicates")
    p_run.add_argument("--workers", type=_positive_int, default=None, help="worker processes (env RDSIM_WORKERS)")
    p_run.add_argument("--out", type=str, default=None, help="output directory")
    p_run.add_argument("--models", type=str, default=None, help="comma-separated models, e.g. cics,oics,pics")
    p_run.add_argument("--resume", action="store_true", help="keep completed replicates in --out")
    p_run.add_argument("--oracle-patients", type=int, default=None, help="oracle mega-trial size per arm")
    p_run.set_defaults(func=cmd_run)

    p_preset = sub.add_parser("preset", help="list presets or print one as a scenario document")
    p_preset.add_argument("name", nargs="?", default=None)
    p_preset.add_argument("--list", action="store_true")
    p_preset.set_defaults(func=cmd_preset)

    p_var = sub.add_parser("varinfl", help="closed-form variance inflation")
    p_var.add_argument("--n1", type=int, required=True, help="completers on treatment")
    p_var.add_argument("--n2", type=int, required=True, help="discontinued, observed at endpoint")
    p_var.add_argument("--n3", type=int, required=True, help="discontinued, missing at endpoint")
    p_var.add_argument("--p1", type=float, required=True)
    p_var.add_argument("--p2", type=float, required=True)
    p_var.set_defaults(func=cmd_varinfl)

    p_dump = sub.add_parser("dump", help="write one simulated (and optionally imputed) trial")
    p_dump.add_argument("--preset", type=str, default=None)
    p_dump.add_argument("--config", type=str, default=None)
    p_dump.add_argument("--replicate", type=int, default=0)
    p_dump.add_argument("--model", type=str, choices=[k.value for k in ModelKind], default=None)
    p_dump.add_argument("--out", type=str, required=True)
    p_dump.set_defaults(func=cmd_dump)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (RdsimError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
