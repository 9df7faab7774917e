from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from crossuda.cli import build_parser, evaluate_dirs, main
from crossuda.config import (ABLATION_LADDER, AblationConfig, ConfigError, RunConfig, from_dict, load_config,
                             replace_flags, to_dict)
from crossuda.pipeline import (STAGE_DIRS, STAGES, AblationRow, format_table, parse_stages, run_ablation,
                               run_pipeline, stage_keys)
from crossuda.stages.common import StageInputError, read_manifest
from crossuda.volume_io import LabelMask, write_mvol

TINY = Path(__file__).resolve().parents[1] / "configs" / "tiny.yaml"


@pytest.fixture(scope="module")
def tiny_cfg() -> RunConfig:
    return load_config(TINY)


@pytest.fixture(scope="module")
def full_run(tmp_path_factory, tiny_cfg):
    run_dir = tmp_path_factory.mktemp("run")
    return run_pipeline(tiny_cfg, run_dir), run_dir


# ------------------------------------------------------------------ config

def test_config_defaults_follow_published_recipe():
    cfg = RunConfig()
    assert cfg.msmt.lr == 0.01 and cfg.msmt.epochs == 300 and cfg.segmenter.epochs == 200
    assert cfg.msmt.ema_alpha == 0.9 and cfg.msmt.rampup_epochs == 160
    assert cfg.msmt.consistency_weights == (0.05, 0.05, 0.05, 0.4, 0.5)
    assert cfg.msmt.momentum == 0.99 and cfg.msmt.weight_decay == 3e-5 and cfg.msmt.k_folds == 5
    assert cfg.preprocess.crop_size == (256, 256) and cfg.preprocess.percentile == 75
    assert cfg.secut.nce_tau == 0.07 and cfg.secut.num_patches == 256 and cfg.secut.seg_weights == (1.0, 0.1)
    assert cfg.secut.lambda_gan == cfg.secut.lambda_nce == cfg.secut.lambda_seg == 1.0


def test_config_rejects_unknown_keys_and_bad_values(tmp_path):
    with pytest.raises(ConfigError, match="unknown keys"):
        from_dict(RunConfig, {"msmt": {"epoch": 3}})
    with pytest.raises(ConfigError):
        from_dict(RunConfig, {"flags": {"use_pl": False, "use_mt": True}})
    with pytest.raises(ConfigError):
        from_dict(RunConfig, {"ablation": {"rows": ["CUT", "nope"]}})
    with pytest.raises(ConfigError):
        from_dict(RunConfig, {"seed": "zero"})
    (tmp_path / "bad.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")


def test_config_roundtrip(tiny_cfg):
    assert from_dict(RunConfig, json.loads(json.dumps(to_dict(tiny_cfg)))) == tiny_cfg


def test_parse_stages():
    assert parse_stages(None) == list(STAGES)
    assert parse_stages("translate:segment") == ["translate", "augment", "segment"]
    assert parse_stages("evaluate,phantom") == ["phantom", "evaluate"]
    assert parse_stages(":preprocess") == ["phantom", "preprocess"]
    with pytest.raises(ValueError):
        parse_stages("train")


def test_stage_keys_share_common_prefixes(tiny_cfg):
    cut = stage_keys(replace_flags(tiny_cfg, use_secut_seg_decoder=False, use_ia=False, use_pl=False, use_mt=False,
                                   multiscale_mt=False))
    cut_ia = stage_keys(replace_flags(tiny_cfg, use_secut_seg_decoder=False, use_pl=False, use_mt=False,
                                      multiscale_mt=False))
    assert cut["translate"] == cut_ia["translate"] and cut["augment"] != cut_ia["augment"]
    mt = stage_keys(replace_flags(tiny_cfg, use_secut_seg_decoder=False, multiscale_mt=False))
    msmt = stage_keys(replace_flags(tiny_cfg, use_secut_seg_decoder=False))
    assert mt["pseudolabel"] == msmt["pseudolabel"] and mt["msmt"] != msmt["msmt"]


# ------------------------------------------------------------------ pipeline

def test_full_run_tree(full_run, tiny_cfg):
    art, run_dir = full_run
    for stage in STAGES:
        assert (run_dir / STAGE_DIRS[stage] / "stage_done.json").exists(), stage
    for name in ("01_translate/generator.ckpt", "02_segmenter/fold0.ckpt", "04_msmt/msmt_fold0.ckpt",
                 "05_eval/report.json", "config.json", "artifacts.json"):
        assert (run_dir / name).exists(), name
    assert art.report is not None and art.report_path == run_dir / "05_eval" / "report.json"
    for p in art.stage_dirs.values():
        assert p.exists() and run_dir in p.parents
    n_hold = tiny_cfg.data.n_holdout_target
    assert len(art.report.per_case) == n_hold


def test_config_echo_reproduces_run(full_run, tmp_path):
    art, run_dir = full_run
    echo = load_config(run_dir / "config.json")
    again = run_pipeline(echo, tmp_path / "again")
    assert (tmp_path / "again" / "05_eval" / "report.json").read_bytes() == art.report_path.read_bytes()


def test_augmentation_doubles_training_manifest(full_run, tiny_cfg, tmp_path):
    _, run_dir = full_run
    man = read_manifest(run_dir / "02_segmenter" / "augment" / "manifest.json")
    assert len(man["labeled"]) == 2 * man["n_original"] == 2 * tiny_cfg.phantom.n_cases
    no_ia = replace_flags(tiny_cfg, use_ia=False)
    run_pipeline(no_ia, tmp_path, ["phantom", "preprocess", "translate", "augment"])
    man = read_manifest(tmp_path / "02_segmenter" / "augment" / "manifest.json")
    assert len(man["labeled"]) == man["n_original"] == tiny_cfg.phantom.n_cases


def test_holdout_cases_never_used_for_training(full_run, tiny_cfg):
    _, run_dir = full_run
    pre = read_manifest(run_dir / "00_preprocess" / "manifest.json")
    hold = {e["id"] for e in pre["target_holdout"]}
    assert len(hold) == tiny_cfg.data.n_holdout_target
    pseudo = read_manifest(run_dir / "03_pseudo" / "manifest.json")["pseudo"]
    assert hold.isdisjoint(e["id"] for e in pseudo)
    assert not any("label" in e and e["label_path"] for e in pre["target_train"])


def test_missing_stage_input_names_artifact(tiny_cfg, tmp_path):
    with pytest.raises(StageInputError, match="manifest.json"):
        run_pipeline(tiny_cfg, tmp_path, ["segment"])


def test_stage_by_stage_equals_single_run(full_run, tiny_cfg, tmp_path):
    art, _ = full_run
    for stage in STAGES:
        run_pipeline(tiny_cfg, tmp_path, [stage])
    assert (tmp_path / "05_eval" / "report.json").read_bytes() == art.report_path.read_bytes()


def test_without_pl_skips_mean_teacher_stages(tiny_cfg, tmp_path):
    cfg = replace_flags(tiny_cfg, use_pl=False, use_mt=False, multiscale_mt=False)
    art = run_pipeline(cfg, tmp_path)
    assert not (tmp_path / "03_pseudo").exists() and not (tmp_path / "04_msmt").exists()
    assert art.report is not None


# ------------------------------------------------------------------ ablation

def test_ablation_table(tiny_cfg, tmp_path):
    cfg = dataclasses.replace(tiny_cfg, ablation=AblationConfig(rows=list(ABLATION_LADDER), include_baseline=True))
    doc = run_ablation(cfg, tmp_path)
    rows = doc["rows"]
    assert [r["method"] for r in rows] == list(ABLATION_LADDER)
    for r in rows:
        assert r["error"] is None
        assert r["mean"][0] == pytest.approx((r["cochlea"][0] + r["vs"][0]) / 2)
    md = (tmp_path / "ablation.md").read_text().splitlines()
    assert md[0] == "| Method | Cochlea | VS | Mean |"
    assert len(md) == 2 + 6 + 1  # header, separator, six ladder rows, baseline
    # shared stages run once: two translators (CUT, SE-CUT) plus the untranslated baseline
    assert len(list((tmp_path / "cache").glob("translate-*"))) == 3
    assert len(list((tmp_path / "cache").glob("msmt-*"))) == 4


def test_ablation_row_subset_and_failure_marker(tiny_cfg, tmp_path, monkeypatch):
    import crossuda.pipeline as pl

    cfg = dataclasses.replace(tiny_cfg, ablation=AblationConfig(rows=["CUT", "CUT+IA"], include_baseline=False))
    real = pl.run_pipeline

    def flaky(row_cfg, *a, **kw):
        if row_cfg.flags.use_ia:
            raise RuntimeError("boom")
        return real(row_cfg, *a, **kw)

    monkeypatch.setattr(pl, "run_pipeline", flaky)
    doc = run_ablation(cfg, tmp_path)
    assert [r["method"] for r in doc["rows"]] == ["CUT", "CUT+IA"]
    assert doc["rows"][0]["error"] is None and "boom" in doc["rows"][1]["error"]
    assert "FAILED" in (tmp_path / "ablation.md").read_text()


def test_format_table_layout():
    table = format_table([AblationRow("CUT", (0.5, 0.1), (0.7, 0.2), (0.6, 0.05))])
    assert "| CUT | 50.00±10.00 | 70.00±20.00 | 60.00±5.00 |" in table


# ------------------------------------------------------------------ CLI

def test_cli_parser_has_all_subcommands():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    assert set(sub.choices) == {"phantom", "preprocess", "translate", "augment", "segment", "pseudolabel", "msmt",
                                "predict", "evaluate", "ablate", "pipeline"}
    args = parser.parse_args(["pipeline", "--config", "c.yaml", "--run-dir", "r", "--seed", "3", "--stages", "a"])
    assert (args.config, args.run_dir, args.seed, args.stages) == ("c.yaml", "r", 3, "a")
    args = parser.parse_args(["--run-dir", "r", "segment"])
    assert args.run_dir == "r"


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["phantom", "--config", str(TINY), "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "manifest.json").exists()
    assert main(["phantom", "--config", str(TINY), "--out", str(tmp_path / "d")]) == 2  # collision
    assert main(["segment", "--config", str(TINY), "--run-dir", str(tmp_path / "r")]) == 2
    assert "missing stage artifact" in capsys.readouterr().err
    (tmp_path / "bad.yaml").write_text("nonsense_key: 1\n")
    assert main(["pipeline", "--config", str(tmp_path / "bad.yaml"), "--run-dir", str(tmp_path / "r")]) == 2


def test_cli_pipeline_stages_and_seed(tmp_path):
    rd = tmp_path / "r"
    assert main(["pipeline", "--config", str(TINY), "--run-dir", str(rd), "--seed", "5",
                 "--stages", "phantom:preprocess"]) == 0
    assert json.loads((rd / "config.json").read_text())["seed"] == 5
    assert (rd / "00_preprocess" / "manifest.json").exists() and not (rd / "01_translate").exists()


def test_cli_standalone_evaluate(tmp_path, capsys):
    pred, gt = tmp_path / "pred", tmp_path / "gt"
    pred.mkdir()
    gt.mkdir()
    lab = np.zeros((4, 6, 6), np.uint8)
    lab[1, 1, 1:3] = 1
    lab[2, 4, 4] = 2
    lab[2, 0, 4] = 2
    noisy = lab.copy()
    noisy[3, 5, 0] = 1  # stray VS voxel that post-processing removes
    write_mvol(LabelMask(noisy), pred / "c1_pred.mvol")
    write_mvol(LabelMask(lab), gt / "c1_label.mvol")
    out = tmp_path / "report.json"
    assert main(["evaluate", "--pred", str(pred), "--gt", str(gt), "--out", str(out), "--postprocess"]) == 0
    rep = json.loads(out.read_text())
    assert rep["per_case"][0]["vs"]["dice"] == 1.0 and rep["assd_exclusions"] == 0
    assert main(["evaluate", "--pred", str(pred), "--gt", str(gt), "--out", str(out), "--units", "mm"]) == 0
    rep = json.loads(out.read_text())
    assert rep["units"] == "mm" and rep["per_case"][0]["vs"]["dice"] < 1.0
    (gt / "c1_label.mvol").unlink()
    with pytest.raises(StageInputError):
        evaluate_dirs(pred, gt, out)
