"""Stage 1: segmentation-enhanced contrastive unpaired translation (source -> target)."""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..config import SecutConfig
from ..losses import lsgan_losses, patchnce_same_image, secut_seg_loss
from ..nets.params import Checkpoint, get_params, load_checkpoint, save_checkpoint, set_params
from ..nets.translation import (DiscriminatorConfig, GeneratorConfig, ResnetGenerator, build_discriminator,
                                build_generator, build_patch_mlp)
from ..volume_io import Volume, restack_slices, slice_volume
from .common import CSVLog, LabeledCase, TrainingDiverged, derive_seed, log, seed_everything

SECUT_LOG_COLUMNS = ["epoch", "d_loss", "g_gan", "nce", "seg", "g_total"]


def generator_config(cfg: SecutConfig, seg_decoder: bool) -> GeneratorConfig:
    return GeneratorConfig(n_res_blocks=cfg.n_res_blocks, base_channels=cfg.base_channels,
                           nce_tap_layers=list(cfg.nce_layers), seg_decoder=seg_decoder)


def _slices(cases: Sequence[LabeledCase], with_labels: bool):
    imgs, labels = [], []
    for c in cases:
        imgs.append(c.volume.data)
        if with_labels:
            labels.append(c.label.data.astype(np.int64))
    x = torch.from_numpy(np.concatenate(imgs)[:, None].astype(np.float32))
    y = torch.from_numpy(np.concatenate(labels)) if with_labels else None
    return x, y


def train_secut(source: Sequence[LabeledCase], target: Sequence[LabeledCase], cfg: SecutConfig,
                out_dir: Path, seed: int, seg_decoder: bool = True) -> Path:
    """Train the translator on 2D z-slices; write ``generator.ckpt`` and ``secut_log.csv``.

    Each iteration takes one discriminator step on the LSGAN loss, then one generator
    step on adversarial + PatchNCE (source and target identity) + the auxiliary
    segmentation loss on the source labels.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = seed_everything(derive_seed(seed, "secut"))
    xs, ys = _slices(source, with_labels=seg_decoder)
    xt, _ = _slices(target, with_labels=False)
    if xs.shape[1:] != xt.shape[1:]:
        raise ValueError(f"source slices {tuple(xs.shape[1:])} and target slices {tuple(xt.shape[1:])} differ")

    gcfg = generator_config(cfg, seg_decoder)
    G = build_generator(gcfg, seed=derive_seed(seed, "secut", "G"))
    D = build_discriminator(DiscriminatorConfig(base_channels=cfg.disc_channels, n_layers=cfg.disc_layers), seed=derive_seed(seed, "secut", "D"))
    F = build_patch_mlp(G, nc=cfg.mlp_dim, seed=derive_seed(seed, "secut", "F"))
    opt_g = torch.optim.Adam(list(G.parameters()) + list(F.parameters()), lr=cfg.lr, betas=tuple(cfg.betas))
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr, betas=tuple(cfg.betas))
    patch_gen = torch.Generator().manual_seed(derive_seed(seed, "secut", "patches"))

    bs = cfg.batch_size
    iters = cfg.iters_per_epoch or max(1, len(xs) // bs)
    size = tuple(xs.shape[-2:])

    def nce(real, fake, feats_real=None):
        feats_k = feats_real if feats_real is not None else G.encode(real)
        feats_k = [feats_k[i] for i in gcfg.nce_tap_layers]
        feats_q = G.encoder_features(fake)
        pool_k, ids = F(feats_k, cfg.num_patches, generator=patch_gen)
        pool_q, _ = F(feats_q, cfg.num_patches, patch_ids=ids)
        return sum(patchnce_same_image(q, k, cfg.nce_tau) for q, k in zip(pool_q, pool_k)) / len(pool_q)

    with CSVLog(out_dir / "secut_log.csv", SECUT_LOG_COLUMNS) as logger:
        for epoch in range(cfg.epochs):
            sums = dict.fromkeys(SECUT_LOG_COLUMNS[1:], 0.0)
            for _ in range(iters):
                si = torch.from_numpy(rng.choice(len(xs), bs, replace=len(xs) < bs))
                ti = torch.from_numpy(rng.choice(len(xt), bs, replace=len(xt) < bs))
                real_a, real_b = xs[si], xt[ti]

                feats_a = G.encode(real_a)
                fake_b = G.translate_from_features(feats_a)

                # discriminator step
                for p in D.parameters():
                    p.requires_grad_(True)
                d_loss, _ = lsgan_losses(D(real_b), D(fake_b.detach()))
                opt_d.zero_grad(set_to_none=True)
                d_loss.backward()
                opt_d.step()

                # generator step
                for p in D.parameters():
                    p.requires_grad_(False)
                _, g_gan = lsgan_losses(None, D(fake_b))
                loss_nce = nce(real_a, fake_b, feats_a)
                if cfg.nce_idt:
                    loss_nce = 0.5 * (loss_nce + nce(real_b, G(real_b)))
                loss_seg = torch.zeros(())
                if seg_decoder:
                    loss_seg = secut_seg_loss(G.seg_decode(feats_a, size), ys[si], cfg.seg_weights)
                g_total = cfg.lambda_gan * g_gan + cfg.lambda_nce * loss_nce + cfg.lambda_seg * loss_seg
                if not torch.isfinite(g_total) or not torch.isfinite(d_loss):
                    save_checkpoint(Checkpoint({"generator": get_params(G)},
                                               {"kind": "generator", "epoch": epoch, "diverged": True}),
                                    out_dir / "diverged.ckpt")
                    raise TrainingDiverged(f"SE-CUT loss became non-finite at epoch {epoch}")
                opt_g.zero_grad(set_to_none=True)
                g_total.backward()
                opt_g.step()

                for k, v in (("d_loss", d_loss), ("g_gan", g_gan), ("nce", loss_nce), ("seg", loss_seg),
                             ("g_total", g_total)):
                    sums[k] += float(v.detach())
            logger.row(epoch=epoch, **{k: v / iters for k, v in sums.items()})
            log.info("secut epoch %d: %s", epoch, {k: round(v / iters, 4) for k, v in sums.items()})

    path = out_dir / "generator.ckpt"
    save_checkpoint(Checkpoint({"generator": get_params(G)},
                               {"kind": "generator", "epoch": cfg.epochs, "config": asdict(gcfg)}), path)
    return path


def load_generator(path: Path) -> ResnetGenerator:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "generator":
        raise ValueError(f"{path} is not a generator checkpoint")
    G = ResnetGenerator(GeneratorConfig(**ckpt.meta["config"]))
    set_params(G, ckpt.groups["generator"])
    return G.eval()


@torch.no_grad()
def translate_volume(generator: ResnetGenerator, v: Volume, batch: int = 16) -> Volume:
    """Translate slice by slice along z and restack with the input spacing."""
    generator.eval()
    slices = slice_volume(v)
    x = torch.from_numpy(np.stack([s.data for s in slices])[:, None].astype(np.float32))
    out = torch.cat([generator(x[i:i + batch]) for i in range(0, len(x), batch)])
    out = out.clamp(0.0, 1.0)[:, 0].numpy()
    for s, o in zip(slices, out):
        s.data = o
    return restack_slices(slices, v.spacing)
