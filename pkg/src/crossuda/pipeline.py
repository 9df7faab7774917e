"""Pipeline orchestration: phantom -> preprocess -> translate -> augment -> segment ->
pseudolabel -> msmt -> predict -> evaluate, plus the ablation ladder.

Every stage reads its inputs from the directories of earlier stages and writes a
``manifest.json`` (or equivalent) into its own directory. A :class:`Layout` maps
stages to directories: the plain pipeline uses fixed names under the run dir, the
ablation harness uses content-keyed directories so rows share identical stages.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import phantom as phantom_mod
from .config import ABLATION_LADDER, RunConfig, config_hash, dump_config, replace_flags
from .metrics import MetricsReport, aggregate_report, evaluate_case
from .stages.augment import augment_cases
from .stages.common import (LabeledCase, StageInputError, case_entry, derive_seed, load_cases, read_manifest,
                            save_case, write_manifest)
from .stages.msmt import split_pools, train_msmt
from .stages.predict import load_ensemble, predict
from .stages.segmenter import load_unet, pseudo_label, train_segmenter
from .stages.translate import load_generator, train_secut, translate_volume
from .volume_io import minmax_normalize, percentile_crop, read_mvol, resample_volume, write_mvol

log = logging.getLogger("crossuda")

STAGES = ("phantom", "preprocess", "translate", "augment", "segment", "pseudolabel", "msmt", "predict", "evaluate")
STAGE_DIRS = {
    "phantom": "data",
    "preprocess": "00_preprocess",
    "translate": "01_translate",
    "augment": "02_segmenter/augment",
    "segment": "02_segmenter",
    "pseudolabel": "03_pseudo",
    "msmt": "04_msmt",
    "predict": "05_eval/predictions",
    "evaluate": "05_eval",
}
DONE = "stage_done.json"


def parse_stages(spec: str | Sequence[str] | None) -> list[str]:
    """``None``/``"all"`` -> every stage; also accepts ``"a,b"`` and ranges like ``"translate:msmt"``."""
    if spec is None or spec == "all":
        return list(STAGES)
    items = spec.split(",") if isinstance(spec, str) else list(spec)
    out: list[str] = []
    for item in items:
        item = item.strip()
        if ":" in item:
            a, b = item.split(":")
            ia = STAGES.index(a) if a else 0
            ib = STAGES.index(b) if b else len(STAGES) - 1
            out += STAGES[ia:ib + 1]
        elif item in STAGES:
            out.append(item)
        else:
            raise ValueError(f"unknown stage {item!r}; valid: {', '.join(STAGES)}")
    return [s for s in STAGES if s in out]


# --------------------------------------------------------------------------- #
# stage keys: a stage's key covers its own config and the keys of its inputs
# --------------------------------------------------------------------------- #

def stage_keys(cfg: RunConfig) -> dict[str, str]:
    f = cfg.flags
    k = {}
    k["phantom"] = config_hash("phantom", cfg.phantom)
    k["preprocess"] = config_hash("preprocess", k["phantom"], cfg.preprocess, cfg.data)
    k["translate"] = config_hash("translate", k["preprocess"], cfg.seed, f.use_translation,
                                 cfg.secut if f.use_translation else None,
                                 f.use_secut_seg_decoder if f.use_translation else None)
    k["augment"] = config_hash("augment", k["translate"], f.use_ia, f.ia_mode if f.use_ia else None)
    k["segment"] = config_hash("segment", k["augment"], cfg.seed, cfg.segmenter)
    k["pseudolabel"] = config_hash("pseudolabel", k["segment"]) if f.use_pl else None
    if f.use_pl:
        k["msmt"] = config_hash("msmt", k["pseudolabel"], cfg.seed, cfg.msmt, f.use_mt,
                                f.multiscale_mt if f.use_mt else None)
        upstream = k["msmt"]
    else:
        k["msmt"] = None
        upstream = k["segment"]
    k["predict"] = config_hash("predict", upstream, k["preprocess"], cfg.predict.postprocess)
    k["evaluate"] = config_hash("evaluate", k["predict"], cfg.predict.units)
    return k


@dataclass
class Layout:
    root: Path
    keyed: bool = False

    def dir(self, stage: str, key: str | None) -> Path:
        if self.keyed:
            return self.root / "cache" / f"{stage}-{key}"
        return self.root / STAGE_DIRS[stage]


@dataclass
class RunArtifacts:
    run_dir: Path
    stage_dirs: dict[str, Path]
    report_path: Path | None = None
    report: MetricsReport | None = None

    def to_dict(self) -> dict:
        return {"run_dir": str(self.run_dir), "stage_dirs": {k: str(v) for k, v in self.stage_dirs.items()},
                "report_path": str(self.report_path) if self.report_path else None}


# --------------------------------------------------------------------------- #
# stage implementations
# --------------------------------------------------------------------------- #

def _stage_phantom(cfg: RunConfig, out: Path, dirs) -> None:
    phantom_mod.generate_dataset(cfg.phantom, out, overwrite=True)


def _stage_preprocess(cfg: RunConfig, out: Path, dirs) -> None:
    """resample -> min-max normalise -> percentile crop, labels and hidden GT following the same window."""
    data_dir = dirs["phantom"]
    man = read_manifest(data_dir / "manifest.json")
    pp = cfg.preprocess
    n_hold = cfg.data.n_holdout_target
    entries: dict[str, list] = {"source": [], "target_train": [], "target_holdout": []}
    hidden = {}
    targets = [e for e in man["cases"] if e["domain"] == phantom_mod.TARGET]
    holdout_ids = {e["id"] for e in targets[len(targets) - n_hold:]} if n_hold else set()
    for e in man["cases"]:
        vol = read_mvol(data_dir / e["volume_path"])
        if e["domain"] == phantom_mod.SOURCE:
            lab = read_mvol(data_dir / e["label_path"])
        else:
            lab = read_mvol(data_dir / "target_gt_eval_only" / f"{e['id']}_label.mvol")
        vol = minmax_normalize(resample_volume(vol, pp.spacing, "image"))
        lab = resample_volume(lab, pp.spacing, "label")
        crop = percentile_crop(vol, lab, pp.percentile, tuple(pp.crop_size))
        if crop.fallback:
            log.warning("preprocess: %s has no voxel above the %.0fth percentile; centered crop used",
                        e["id"], pp.percentile)
        if e["domain"] == phantom_mod.SOURCE:
            entries["source"].append(save_case(LabeledCase(e["id"], crop.volume, crop.mask), out / "source", out))
        else:
            split = "target_holdout" if e["id"] in holdout_ids else "target_train"
            entries[split].append(save_case(LabeledCase(e["id"], crop.volume, None), out / "target", out))
            if split == "target_holdout":
                gt_path = out / "target_gt_eval_only" / f"{e['id']}_label.mvol"
                gt_path.parent.mkdir(parents=True, exist_ok=True)
                write_mvol(crop.mask, gt_path)
                hidden[e["id"]] = str(gt_path.relative_to(out))
    write_manifest(out / "manifest.json", {**entries, "holdout_gt": hidden})


def _stage_translate(cfg: RunConfig, out: Path, dirs) -> None:
    pre = dirs["preprocess"]
    man = read_manifest(pre / "manifest.json")
    source = load_cases(man["source"], pre)
    entries = []
    if cfg.flags.use_translation:
        target = load_cases(man["target_train"], pre)
        gpath = train_secut(source, target, cfg.secut, out, cfg.seed, seg_decoder=cfg.flags.use_secut_seg_decoder)
        G = load_generator(gpath)
        synth = [LabeledCase(c.id, translate_volume(G, c.volume), c.label, c.group) for c in source]
    else:
        synth = source
    for c in synth:
        entries.append(save_case(c, out / "translated", out))
    write_manifest(out / "manifest.json", {"labeled": entries, "translated": cfg.flags.use_translation})


def _stage_augment(cfg: RunConfig, out: Path, dirs) -> None:
    tdir = dirs["translate"]
    cases = load_cases(read_manifest(tdir / "manifest.json")["labeled"], tdir)
    entries = [case_entry(c.id, _rel(tdir / e["volume_path"], out), _rel(tdir / e["label_path"], out), c.group)
               for c, e in zip(cases, read_manifest(tdir / "manifest.json")["labeled"])]
    if cfg.flags.use_ia:
        for c in augment_cases(cases, cfg.flags.ia_mode):
            entries.append(save_case(c, out / "volumes", out))
    write_manifest(out / "manifest.json", {"labeled": entries, "n_original": len(cases)})


def _rel(path: Path, start: Path) -> str:
    # manifests hold paths relative to their own directory so a run dir can be moved
    return os.path.relpath(path, start)


def _stage_segment(cfg: RunConfig, out: Path, dirs) -> None:
    adir = dirs["augment"]
    cases = load_cases(read_manifest(adir / "manifest.json")["labeled"], adir)
    paths = train_segmenter(cases, cfg.segmenter, out, derive_seed(cfg.seed, "segment"))
    write_manifest(out / "manifest.json", {"checkpoints": [p.name for p in paths], "n_cases": len(cases)})


def _stage_pseudolabel(cfg: RunConfig, out: Path, dirs) -> None:
    sdir, pre = dirs["segment"], dirs["preprocess"]
    models = [load_unet(sdir / n) for n in read_manifest(sdir / "manifest.json")["checkpoints"]]
    targets = load_cases(read_manifest(pre / "manifest.json")["target_train"], pre)
    labels = pseudo_label(models, [t.volume for t in targets])
    entries = []
    for t, lab in zip(targets, labels):
        lp = out / "labels" / f"{t.id}_pseudo.mvol"
        lp.parent.mkdir(parents=True, exist_ok=True)
        write_mvol(lab, lp)
        entries.append(case_entry(t.id, _rel(pre / _entry(pre, "target_train", t.id)["volume_path"], out),
                                  str(lp.relative_to(out))))
    write_manifest(out / "manifest.json", {"pseudo": entries})


def _entry(root: Path, split: str, case_id: str) -> dict:
    for e in read_manifest(root / "manifest.json")[split]:
        if e["id"] == case_id:
            return e
    raise KeyError(case_id)


def _stage_msmt(cfg: RunConfig, out: Path, dirs) -> None:
    adir, pdir = dirs["augment"], dirs["pseudolabel"]
    labeled = load_cases(read_manifest(adir / "manifest.json")["labeled"], adir)
    pseudo = load_cases(read_manifest(pdir / "manifest.json")["pseudo"], pdir)
    seed = derive_seed(cfg.seed, "msmt")
    names = []
    for f, (lab, pl) in enumerate(split_pools(labeled, pseudo, cfg.msmt.k_folds, seed)):
        name = f"msmt_fold{f}.ckpt"
        snap = out / f"snapshots_fold{f}" if cfg.msmt.snapshot_every else None
        train_msmt(lab, pl, cfg.msmt, out / name, out / f"msmt_fold{f}_log.csv", derive_seed(seed, "fold", f),
                   use_mt=cfg.flags.use_mt, multiscale=cfg.flags.multiscale_mt, snapshot_dir=snap)
        names.append(name)
    write_manifest(out / "manifest.json", {"checkpoints": names,
                                           "network": "teacher" if cfg.flags.use_mt else "student"})


def _stage_predict(cfg: RunConfig, out: Path, dirs) -> None:
    pre = dirs["preprocess"]
    model_dir = dirs["msmt"] if cfg.flags.use_pl else dirs["segment"]
    man = read_manifest(model_dir / "manifest.json")
    models = load_ensemble([model_dir / n for n in man["checkpoints"]], man.get("network"))
    entries = []
    for c in load_cases(read_manifest(pre / "manifest.json")["target_holdout"], pre):
        pred = predict(models, c.volume, postprocess=cfg.predict.postprocess)
        p = out / f"{c.id}_pred.mvol"
        write_mvol(pred, p)
        entries.append({"id": c.id, "pred_path": p.name})
    write_manifest(out / "manifest.json", {"predictions": entries, "postprocess": cfg.predict.postprocess})


def _stage_evaluate(cfg: RunConfig, out: Path, dirs) -> None:
    pre, pdir = dirs["preprocess"], dirs["predict"]
    gt = read_manifest(pre / "manifest.json")["holdout_gt"]
    per_case = []
    for e in read_manifest(pdir / "manifest.json")["predictions"]:
        per_case.append(evaluate_case(e["id"], read_mvol(pdir / e["pred_path"]), read_mvol(pre / gt[e["id"]]),
                                      units=cfg.predict.units))
    aggregate_report(per_case, units=cfg.predict.units).write(out / "report.json")


STAGE_FUNCS = {
    "phantom": _stage_phantom, "preprocess": _stage_preprocess, "translate": _stage_translate,
    "augment": _stage_augment, "segment": _stage_segment, "pseudolabel": _stage_pseudolabel,
    "msmt": _stage_msmt, "predict": _stage_predict, "evaluate": _stage_evaluate,
}
MANIFEST = {"evaluate": "report.json"}


def active_stages(cfg: RunConfig) -> list[str]:
    if cfg.flags.use_pl:
        return list(STAGES)
    return [s for s in STAGES if s not in ("pseudolabel", "msmt")]


def run_pipeline(cfg: RunConfig, run_dir: str | Path, stages: Sequence[str] | str | None = None,
                 layout: Layout | None = None, reuse: bool = False) -> RunArtifacts:
    """Run the requested stages in pipeline order.

    Stages disabled by the flags are skipped. A requested stage whose inputs were
    never produced raises :class:`StageInputError` naming the missing artifact.
    With ``reuse=True`` a stage whose directory already holds a completion marker
    with the same key is not re-run.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    layout = layout or Layout(run_dir)
    if not layout.keyed:
        dump_config(cfg, run_dir / "config.json")
    keys = stage_keys(cfg)
    wanted = parse_stages(stages)
    enabled = active_stages(cfg)
    dirs = {s: layout.dir(s, keys[s]) for s in enabled}
    for stage in enabled:
        if stage not in wanted:
            continue
        out = dirs[stage]
        marker = out / DONE
        if reuse and marker.exists() and json.loads(marker.read_text()).get("key") == keys[stage]:
            log.info("stage %s: reusing %s", stage, out)
            continue
        log.info("stage %s -> %s", stage, out)
        out.mkdir(parents=True, exist_ok=True)
        if marker.exists():
            marker.unlink()
        try:
            STAGE_FUNCS[stage](cfg, out, dirs)
        except StageInputError as exc:
            raise StageInputError(f"stage '{stage}' cannot run: {exc}") from exc
        marker.write_text(json.dumps({"stage": stage, "key": keys[stage]}))
    report_path = dirs["evaluate"] / "report.json"
    artifacts = RunArtifacts(run_dir, dirs, report_path if report_path.exists() else None)
    if artifacts.report_path is not None:
        artifacts.report = _report_from_json(report_path)
    if not layout.keyed:
        (run_dir / "artifacts.json").write_text(json.dumps(artifacts.to_dict(), indent=2, sort_keys=True))
    return artifacts


def _report_from_json(path: Path):
    from .metrics import CaseMetrics

    d = json.loads(path.read_text())
    per_case = [CaseMetrics(c["case_id"], {k: v for k, v in c.items() if k != "case_id"}) for c in d["per_case"]]
    return MetricsReport(per_case, d["aggregate"], d["assd_exclusions"], d.get("units", "voxel"))


# --------------------------------------------------------------------------- #
# ablation ladder
# --------------------------------------------------------------------------- #

ROW_FLAGS = {
    "no-adaptation": dict(use_translation=False, use_secut_seg_decoder=False, use_ia=False, use_pl=False,
                          use_mt=False, multiscale_mt=False),
    "CUT": dict(use_translation=True, use_secut_seg_decoder=False, use_ia=False, use_pl=False, use_mt=False,
                multiscale_mt=False),
    "CUT+IA": dict(use_translation=True, use_secut_seg_decoder=False, use_ia=True, use_pl=False, use_mt=False,
                   multiscale_mt=False),
    "CUT+IA+PL": dict(use_translation=True, use_secut_seg_decoder=False, use_ia=True, use_pl=True, use_mt=False,
                      multiscale_mt=False),
    "CUT+IA+PL+MT": dict(use_translation=True, use_secut_seg_decoder=False, use_ia=True, use_pl=True, use_mt=True,
                         multiscale_mt=False),
    "CUT+IA+PL+MS-MT": dict(use_translation=True, use_secut_seg_decoder=False, use_ia=True, use_pl=True,
                            use_mt=True, multiscale_mt=True),
    "SE-CUT+IA+PL+MS-MT": dict(use_translation=True, use_secut_seg_decoder=True, use_ia=True, use_pl=True,
                               use_mt=True, multiscale_mt=True),
}


@dataclass
class AblationRow:
    method: str
    cochlea: tuple[float, float] | None = None
    vs: tuple[float, float] | None = None
    mean: tuple[float, float] | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _row_from_report(method: str, report: MetricsReport) -> AblationRow:
    a = report.aggregate
    co = (a["cochlea"]["dice_mean"], a["cochlea"]["dice_std"])
    vs = (a["vs"]["dice_mean"], a["vs"]["dice_std"])
    mean = ((co[0] + vs[0]) / 2.0, a["mean"]["dice_std"])
    return AblationRow(method, co, vs, mean)


def format_table(rows: Sequence[AblationRow], baseline: AblationRow | None = None) -> str:
    def cell(v):
        return f"{100 * v[0]:.2f}±{100 * v[1]:.2f}" if v else "—"

    lines = ["| Method | Cochlea | VS | Mean |", "|---|---|---|---|"]
    for r in ([baseline] if baseline else []) + list(rows):
        if r.error:
            lines.append(f"| {r.method} | FAILED | FAILED | FAILED ({r.error}) |")
        else:
            lines.append(f"| {r.method} | {cell(r.cochlea)} | {cell(r.vs)} | {cell(r.mean)} |")
    return "\n".join(lines) + "\n"


def run_ablation(cfg: RunConfig, run_dir: str | Path) -> dict:
    """Run the enabled ladder rows (and the no-adaptation baseline) sharing identical stages.

    Writes ``ablation.json`` and ``ablation.md`` (Dice in %, mean±std) to ``run_dir``.
    A failing row is recorded with its error and the remaining rows still run.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, run_dir / "config.json")
    layout = Layout(run_dir, keyed=True)
    methods = [m for m in ABLATION_LADDER if m in cfg.ablation.rows]
    if cfg.ablation.include_baseline:
        methods = ["no-adaptation"] + methods
    results: dict[str, AblationRow] = {}
    row_dirs = {}
    for method in methods:
        row_cfg = replace_flags(cfg, **ROW_FLAGS[method])
        log.info("ablation row %s", method)
        try:
            art = run_pipeline(row_cfg, run_dir, None, layout=layout, reuse=True)
            results[method] = _row_from_report(method, art.report)
            row_dirs[method] = {k: str(v.relative_to(run_dir)) for k, v in art.stage_dirs.items()}
        except Exception as exc:  # a failed row must not sink the table
            log.exception("ablation row %s failed", method)
            results[method] = AblationRow(method, error=f"{type(exc).__name__}: {exc}")
    baseline = results.pop("no-adaptation", None)
    rows = [results[m] for m in methods if m in results]
    doc = {"rows": [r.to_dict() for r in rows], "baseline": baseline.to_dict() if baseline else None,
           "stage_dirs": row_dirs}
    (run_dir / "ablation.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    (run_dir / "ablation.md").write_text(format_table(rows, baseline))
    return doc
