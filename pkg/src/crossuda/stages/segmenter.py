"""Stage 2: K-fold U-Net training on synthetic target images, and ensemble pseudo-labeling."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..config import TrainConfig
from ..losses import deep_supervision_loss
from ..metrics import CLASS_NAMES, dice
from ..nets.params import Checkpoint, get_params, load_checkpoint, save_checkpoint, set_params
from ..nets.unet import UNet3D, UNetConfig, build_unet3d
from ..volume_io import LabelMask, Volume
from .common import (CSVLog, LabeledCase, check_finite, derive_seed, fold_assignment, log,
                     poly_lr, seed_everything, stack_batch, to_tensor)

SEG_LOG_COLUMNS = ["epoch", "lr", "train_loss", "val_dice"]


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                           nesterov=cfg.nesterov and cfg.momentum > 0)


def split_folds(cases: Sequence[LabeledCase], k: int, seed: int) -> list[tuple[list[LabeledCase], list[LabeledCase]]]:
    """(train, validation) pairs; with k=1 the single fold trains on everything."""
    if k == 1:
        return [(list(cases), [])]
    assign = fold_assignment([c.group for c in cases], k, seed)
    return [([c for c in cases if assign[c.group] != f], [c for c in cases if assign[c.group] == f])
            for f in range(k)]


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def train_unet(cases: Sequence[LabeledCase], cfg: TrainConfig, seed: int, log_path: Path,
               val_cases: Sequence[LabeledCase] = ()) -> UNet3D:
    """Supervised deep-supervision training with SGD and polynomial learning-rate decay."""
    rng = seed_everything(seed)
    model = build_unet3d(cfg.unet, seed=derive_seed(seed, "init"))
    opt = make_optimizer(model, cfg)
    bs = min(cfg.batch_size, len(cases))
    iters = cfg.iters_per_epoch or int(np.ceil(len(cases) / bs))
    with CSVLog(log_path, SEG_LOG_COLUMNS) as logger:
        for epoch in range(cfg.epochs):
            lr = poly_lr(cfg.lr, epoch, cfg.epochs, cfg.poly_exponent)
            _set_lr(opt, lr)
            model.train()
            order = rng.permutation(len(cases))
            total = 0.0
            for it in range(iters):
                idx = [order[(it * bs + j) % len(cases)] for j in range(bs)]
                x, y = stack_batch([cases[i] for i in idx])
                loss = deep_supervision_loss(model(x), y)
                check_finite(loss, f"segmenter loss at epoch {epoch}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += float(loss.detach())
            val = validation_dice(model, val_cases) if val_cases else float("nan")
            logger.row(epoch=epoch, lr=lr, train_loss=total / iters, val_dice=val)
            log.info("segmenter epoch %d: loss %.4f val dice %.4f", epoch, total / iters, val)
    return model


@torch.no_grad()
def predict_probs(models: Sequence[UNet3D], volume: Volume) -> np.ndarray:
    """Mean full-resolution softmax over ``models`` in deterministic mode, shape [C, Z, Y, X]."""
    x = to_tensor(volume)[None]
    acc = None
    for m in models:
        m.eval()
        p = torch.softmax(m(x)[0], dim=1)[0].double()
        acc = p if acc is None else acc + p
    return (acc / len(models)).numpy()


def validation_dice(model: UNet3D, cases: Sequence[LabeledCase]) -> float:
    scores = []
    for c in cases:
        pred = predict_probs([model], c.volume).argmax(0)
        scores.append(np.mean([dice(pred == k, c.label.data == k) for k in CLASS_NAMES]))
    model.train()
    return float(np.mean(scores))


def save_unet(model: UNet3D, path: Path, epoch: int, kind: str = "segmenter", extra: dict | None = None) -> None:
    meta = {"kind": kind, "epoch": epoch, "config": dataclasses.asdict(model.cfg), **(extra or {})}
    save_checkpoint(Checkpoint({"model": get_params(model)}, meta), path)


def load_unet(path: Path, group: str | None = None) -> UNet3D:
    """Load a segmenter checkpoint, or one network (``teacher`` by default) of a mean-teacher pair."""
    ckpt = load_checkpoint(path)
    kind = ckpt.meta.get("kind")
    if kind == "segmenter":
        params = ckpt.groups["model"]
    elif kind == "mean_teacher":
        params = ckpt.groups[group or "teacher"]
    else:
        raise ValueError(f"{path}: not a U-Net checkpoint (kind={kind!r})")
    recorded = ckpt.meta["config"]
    model = UNet3D(UNetConfig(**recorded.get("unet", recorded)))
    try:
        set_params(model, params)
    except ValueError as exc:
        raise ValueError(f"{path}: checkpoint does not match its recorded config") from exc
    return model.eval()


def train_segmenter(cases: Sequence[LabeledCase], cfg: TrainConfig, out_dir: Path, seed: int) -> list[Path]:
    """Train one U-Net per fold; write ``fold{k}.ckpt``, ``fold{k}_log.csv`` and ``folds.json``."""
    if cfg.k_folds > len({c.group for c in cases}):
        raise ValueError(f"k_folds={cfg.k_folds} exceeds the number of cases ({len(cases)})")
    out_dir.mkdir(parents=True, exist_ok=True)
    folds = split_folds(cases, cfg.k_folds, seed)
    paths = []
    for f, (train, val) in enumerate(folds):
        log.info("segmenter fold %d: %d train / %d val cases", f, len(train), len(val))
        model = train_unet(train, cfg, derive_seed(seed, "segmenter", f), out_dir / f"fold{f}_log.csv", val)
        path = out_dir / f"fold{f}.ckpt"
        save_unet(model, path, cfg.epochs, extra={"fold": f, "val_ids": [c.id for c in val]})
        paths.append(path)
    folds_doc = {f"fold{f}": {"train": [c.id for c in tr], "val": [c.id for c in va]}
                 for f, (tr, va) in enumerate(folds)}
    (out_dir / "folds.json").write_text(json.dumps(folds_doc, indent=2, sort_keys=True))
    return paths


def pseudo_label(models: Sequence[UNet3D], volumes: Sequence[Volume]) -> list[LabelMask]:
    """Argmax of the fold-averaged softmax for each volume."""
    if not models:
        raise ValueError("pseudo_label needs at least one model")
    return [LabelMask(predict_probs(models, v).argmax(0).astype(np.uint8), v.spacing) for v in volumes]
