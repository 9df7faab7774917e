"""Stage 3: multi-scale mean teacher on labeled synthetic + pseudo-labeled target volumes."""

from __future__ import annotations

import copy
import dataclasses
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..config import TrainConfig
from ..losses import ConsistencyWeights, RampupSchedule, consistency_loss, deep_supervision_loss, rampup_weight
from ..nets.params import (Checkpoint, CheckpointPair, ema_update_model, get_params, optimizer_state_params,
                           save_checkpoint)
from ..nets.unet import UNet3D, build_unet3d, softmax_outputs
from .common import (CSVLog, LabeledCase, TrainingDiverged, derive_seed, log, poly_lr, seed_everything,
                     stack_batch)
from .segmenter import _set_lr, make_optimizer, split_folds

MSMT_LOG_COLUMNS = ["epoch", "iteration", "lr", "rampup", "sup_loss", "cons_loss", "total"]
FULL_RES_ONLY = (0.0, 0.0, 0.0, 0.0, 1.0)


def _perturb(x: torch.Tensor, sigma: float, gen: torch.Generator) -> torch.Tensor:
    if sigma <= 0:
        return x
    return x + sigma * torch.randn(x.shape, generator=gen)


def _snapshot(model: UNet3D, path: Path, group: str, iteration: int) -> None:
    save_checkpoint(Checkpoint({group: get_params(model)}, {"kind": "snapshot", "iteration": iteration}), path)


def train_msmt(labeled: Sequence[LabeledCase], pseudo: Sequence[LabeledCase], cfg: TrainConfig,
               out_path: Path, log_path: Path, seed: int, use_mt: bool = True, multiscale: bool = True,
               snapshot_dir: Path | None = None) -> CheckpointPair:
    """Train a student with deep supervision on both pools plus ramped multi-scale consistency.

    The teacher starts as a copy of the student and is only ever updated by EMA,
    once per optimizer step. With ``use_mt=False`` the consistency term is dropped
    (plain retraining on ground-truth + pseudo labels). With ``multiscale=False``
    only the full-resolution map is made consistent, with weight 1.
    """
    if not labeled or not pseudo:
        raise ValueError("train_msmt needs non-empty labeled and pseudo-labeled pools")
    rng = seed_everything(seed)
    noise_gen = torch.Generator().manual_seed(derive_seed(seed, "noise"))
    student = build_unet3d(cfg.unet, seed=derive_seed(seed, "init"))
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    if not cfg.perturbation.dropout:
        student.deterministic(True)
        teacher.deterministic(True)
    opt = make_optimizer(student, cfg)
    weights = ConsistencyWeights(cfg.consistency_weights if multiscale else FULL_RES_ONLY)
    sched = RampupSchedule(cfg.rampup_epochs)

    n_lab = -(-cfg.batch_size // 2)  # half the batch from the labeled pool, rounding up
    n_pl = cfg.batch_size - n_lab
    if n_pl == 0:
        raise ValueError("batch_size must be >= 2 to mix both pools")
    iters = cfg.iters_per_epoch or int(np.ceil(max(len(labeled) / n_lab, len(pseudo) / n_pl)))

    if snapshot_dir is not None:
        snapshot_dir.mkdir(parents=True, exist_ok=True)
        _snapshot(student, snapshot_dir / "student_00000.ckpt", "student", 0)

    iteration = 0
    with CSVLog(log_path, MSMT_LOG_COLUMNS) as logger:
        for epoch in range(cfg.epochs):
            lr = poly_lr(cfg.lr, epoch, cfg.epochs, cfg.poly_exponent)
            _set_lr(opt, lr)
            lam = rampup_weight(epoch, sched) if use_mt else 0.0
            lab_order, pl_order = rng.permutation(len(labeled)), rng.permutation(len(pseudo))
            student.train()
            teacher.train()
            for it in range(iters):
                batch = [labeled[lab_order[(it * n_lab + j) % len(labeled)]] for j in range(n_lab)]
                batch += [pseudo[pl_order[(it * n_pl + j) % len(pseudo)]] for j in range(n_pl)]
                x, y = stack_batch(batch)
                s_out = student(_perturb(x, cfg.perturbation.noise_sigma, noise_gen))
                sup = deep_supervision_loss(s_out, y)
                cons = torch.zeros(())
                if use_mt:
                    with torch.no_grad():
                        t_out = teacher(_perturb(x, cfg.perturbation.noise_sigma, noise_gen))
                    cons = consistency_loss(softmax_outputs(s_out), softmax_outputs(t_out), weights)
                total = sup + lam * cons
                if not torch.isfinite(total):
                    pair = CheckpointPair(get_params(student), get_params(teacher), epoch)
                    save_checkpoint(pair.to_checkpoint(), out_path.with_name("diverged.ckpt"))
                    raise TrainingDiverged(f"mean-teacher loss became non-finite at epoch {epoch}, iteration {iteration}")
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
                ema_update_model(teacher, student, cfg.ema_alpha)
                iteration += 1
                logger.row(epoch=epoch, iteration=iteration, lr=lr, rampup=lam, sup_loss=float(sup.detach()),
                           cons_loss=float(cons.detach()), total=float(total.detach()))
                if snapshot_dir is not None and cfg.snapshot_every and iteration % cfg.snapshot_every == 0:
                    _snapshot(student, snapshot_dir / f"student_{iteration:05d}.ckpt", "student", iteration)
                    _snapshot(teacher, snapshot_dir / f"teacher_{iteration:05d}.ckpt", "teacher", iteration)
            log.info("msmt epoch %d: lambda %.4f last sup %.4f cons %.5f", epoch, lam, float(sup.detach()), float(cons.detach()))

    pair = CheckpointPair(get_params(student), get_params(teacher), cfg.epochs, optimizer_state_params(student, opt),
                          {"unet": dataclasses.asdict(cfg.unet), "use_mt": use_mt, "multiscale": multiscale,
                           "ema_alpha": cfg.ema_alpha})
    save_checkpoint(pair.to_checkpoint(), out_path)
    return pair


def split_pools(labeled: Sequence[LabeledCase], pseudo: Sequence[LabeledCase], k: int, seed: int):
    """K-fold variants over both pools so that fold teachers can be ensembled; k=1 uses everything."""
    if k == 1:
        return [(list(labeled), list(pseudo))]
    lab_folds = split_folds(labeled, k, derive_seed(seed, "labeled"))
    pl_folds = split_folds(pseudo, k, derive_seed(seed, "pseudo"))
    return [(lab_folds[f][0], pl_folds[f][0]) for f in range(k)]
