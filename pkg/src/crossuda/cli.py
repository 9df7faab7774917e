"""``crossuda`` command line: one subcommand per pipeline stage plus ``pipeline`` and ``ablate``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import phantom as phantom_mod
from .config import ConfigError, RunConfig, load_config
from .metrics import aggregate_report, evaluate_case, lcc_filter
from .pipeline import STAGES, parse_stages, run_ablation, run_pipeline
from .stages.common import StageInputError, TrainingDiverged
from .volume_io import MVOLError, read_mvol

log = logging.getLogger("crossuda")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    # registered on the root parser and every subparser so flags work on either side of the subcommand
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=default, help="YAML or JSON run config (defaults if omitted)")
    p.add_argument("--run-dir", default=default, help="directory that receives every stage output")
    p.add_argument("--seed", type=int, default=default, help="override the config seed")
    p.add_argument("--stages", default=default,
                   help="comma list or range (e.g. 'translate:msmt') for the pipeline subcommand")
    p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossuda", description="Cross-modality UDA pipeline on phantom data.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate the paired-domain phantom dataset")
    _global_flags(p, suppress=True)
    p.add_argument("--out", help="dataset directory (default: <run-dir>/data)")
    p.add_argument("--overwrite", action="store_true")

    for stage in STAGES[1:-1]:
        sp = sub.add_parser(stage, help=f"run the {stage} stage inside --run-dir")
        _global_flags(sp, suppress=True)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    _global_flags(p, suppress=True)
    p.add_argument("--pred", help="directory of predicted label volumes (standalone mode)")
    p.add_argument("--gt", help="directory of ground-truth label volumes (standalone mode)")
    p.add_argument("--out", help="report path (standalone mode)")
    p.add_argument("--units", choices=("voxel", "mm"), default=None)
    p.add_argument("--postprocess", action="store_true", help="apply largest-component filtering first")

    for name, hlp in (("pipeline", "run the pipeline (all stages or --stages)"),
                      ("ablate", "run the ablation ladder and write ablation.json/.md")):
        sp = sub.add_parser(name, help=hlp)
        _global_flags(sp, suppress=True)
    return parser


def _effective_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _require_run_dir(args) -> Path:
    if not args.run_dir:
        raise SystemExit("crossuda: --run-dir is required for this command")
    return Path(args.run_dir)


def _case_id(path: Path) -> str:
    stem = path.name[:-len(".mvol")]
    for suffix in ("_pred", "_label"):
        if stem.endswith(suffix):
            return stem[:-len(suffix)]
    return stem


def evaluate_dirs(pred_dir: Path, gt_dir: Path, out: Path, units: str = "voxel", postprocess: bool = False):
    """Pair ``<id>[_pred].mvol`` with ``<id>[_label].mvol`` by case id and write a report."""
    preds = {_case_id(p): p for p in sorted(pred_dir.glob("*.mvol"))}
    gts = {_case_id(p): p for p in sorted(gt_dir.glob("*.mvol"))}
    if not preds:
        raise StageInputError(f"no predictions (*.mvol) in {pred_dir}")
    missing = sorted(set(preds) - set(gts))
    if missing:
        raise StageInputError(f"no ground truth in {gt_dir} for cases {missing}")
    per_case = []
    for cid, p in preds.items():
        pred = read_mvol(p)
        if postprocess:
            pred = lcc_filter(pred)
        per_case.append(evaluate_case(cid, pred, read_mvol(gts[cid]), units=units))
    report = aggregate_report(per_case, units=units)
    report.write(out)
    return report


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = _effective_config(args)
        cmd = args.command
        if cmd == "phantom":
            out = Path(args.out) if args.out else _require_run_dir(args) / "data"
            phantom_mod.generate_dataset(cfg.phantom, out, overwrite=args.overwrite)
            print(out)
        elif cmd == "evaluate" and args.pred:
            if not (args.gt and args.out):
                raise SystemExit("crossuda evaluate: --pred needs --gt and --out")
            report = evaluate_dirs(Path(args.pred), Path(args.gt), Path(args.out), args.units or "voxel",
                                   args.postprocess)
            print(json.dumps(report.aggregate["mean"], sort_keys=True))
        elif cmd == "ablate":
            doc = run_ablation(cfg, _require_run_dir(args))
            print((Path(args.run_dir) / "ablation.md").read_text(), end="")
            if any(r.get("error") for r in doc["rows"]):
                return 1
        else:
            if cmd == "evaluate" and args.units:
                cfg = dataclasses.replace(cfg, predict=dataclasses.replace(cfg.predict, units=args.units))
            stages = parse_stages(args.stages) if cmd == "pipeline" else [cmd]
            art = run_pipeline(cfg, _require_run_dir(args), stages)
            if art.report is not None and "evaluate" in stages:
                print(json.dumps(art.report.aggregate["mean"], sort_keys=True))
    except (ConfigError, StageInputError, MVOLError, TrainingDiverged, FileExistsError, ValueError) as exc:
        print(f"crossuda: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
