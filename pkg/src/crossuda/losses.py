"""Training objectives for translation, segmentation and mean-teacher consistency."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

DICE_EPS = 1e-5
DEFAULT_CONSISTENCY_WEIGHTS = (0.05, 0.05, 0.05, 0.4, 0.5)
SECUT_SEG_WEIGHTS = (1.0, 0.1)


@dataclass
class ConsistencyWeights:
    # ascending spatial size: coarsest first, full resolution last
    w: tuple[float, ...] = DEFAULT_CONSISTENCY_WEIGHTS

    def __post_init__(self):
        self.w = tuple(float(x) for x in self.w)
        if len(self.w) != 5 or any(x < 0 for x in self.w):
            raise ValueError("consistency weights must be 5 non-negative numbers")


@dataclass
class RampupSchedule:
    T: float = 160

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("ramp-up length must be >= 1 epoch")


@dataclass
class SegLossWeights:
    deep_supervision: tuple[float, ...] = field(default_factory=lambda: deep_supervision_weights(5))
    secut_seg: tuple[float, float] = SECUT_SEG_WEIGHTS


def deep_supervision_weights(n_scales: int = 5) -> tuple[float, ...]:
    """Weights 2^-s normalised to sum to 1, full resolution first ([16, 8, 4, 2, 1] / 31 for 5)."""
    raw = [2.0 ** (n_scales - 1 - s) for s in range(n_scales)]
    total = sum(raw)
    return tuple(r / total for r in raw)


def _check_target(logits: torch.Tensor, target: torch.Tensor) -> None:
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} do not match")
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= logits.shape[1]):
        raise ValueError(f"target classes must lie in 0..{logits.shape[1] - 1}")


def cross_entropy_term(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, target.long())


def soft_dice_term(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - mean soft Dice over the foreground classes, sums taken over batch and space."""
    n_classes = logits.shape[1]
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target.long(), n_classes).movedim(-1, 1).to(probs.dtype)
    dims = [0] + list(range(2, logits.ndim))
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    dsc = (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)
    return 1.0 - dsc[1:].mean()


def dice_ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Cross-entropy plus soft Dice loss. ``logits`` is [B, C, *spatial], ``target`` [B, *spatial]."""
    _check_target(logits, target)
    return cross_entropy_term(logits, target) + soft_dice_term(logits, target)


def downsample_target(target: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    """Nearest-neighbour downsampling of an integer label map to ``shape`` (spatial dims)."""
    if tuple(target.shape[1:]) == tuple(shape):
        return target
    t = F.interpolate(target[:, None].float(), size=tuple(shape), mode="nearest")
    return t[:, 0].long()


def deep_supervision_loss(preds: Sequence[torch.Tensor], target: torch.Tensor,
                          weights: Sequence[float] | None = None) -> torch.Tensor:
    """Weighted Dice+CE over scales; ``preds`` ordered full resolution first."""
    weights = deep_supervision_weights(len(preds)) if weights is None else tuple(weights)
    if len(weights) != len(preds):
        raise ValueError(f"{len(preds)} predictions but {len(weights)} weights")
    full = tuple(target.shape[1:])
    total = preds[0].new_zeros(())
    for s, (p, w) in enumerate(zip(preds, weights)):
        expected = tuple(d // 2 ** s for d in full)
        if tuple(p.shape[2:]) != expected:
            raise ValueError(f"scale {s}: prediction spatial shape {tuple(p.shape[2:])} != {expected}")
        if w:
            total = total + w * dice_ce_loss(p, downsample_target(target, expected))
    return total


def consistency_loss(student_probs: Sequence[torch.Tensor], teacher_probs: Sequence[torch.Tensor],
                     w: ConsistencyWeights | Sequence[float] = DEFAULT_CONSISTENCY_WEIGHTS) -> torch.Tensor:
    """Sum over scales of w_s * MSE(student_s, teacher_s).

    Weights are matched to the maps by ascending spatial size, whatever order the
    maps come in. Teacher maps are detached.
    """
    weights = w.w if isinstance(w, ConsistencyWeights) else tuple(w)
    if len(student_probs) != len(teacher_probs) or len(student_probs) != len(weights):
        raise ValueError("student, teacher and weight counts differ")
    for s, t in zip(student_probs, teacher_probs):
        if s.shape != t.shape:
            raise ValueError(f"shape mismatch {tuple(s.shape)} vs {tuple(t.shape)}")
    order = sorted(range(len(student_probs)), key=lambda i: student_probs[i][0, 0].numel())
    total = student_probs[0].new_zeros(())
    for rank, i in enumerate(order):
        if weights[rank]:
            total = total + weights[rank] * torch.mean((student_probs[i] - teacher_probs[i].detach()) ** 2)
    return total


def rampup_weight(epoch: float, sched: RampupSchedule | float = 160) -> float:
    """exp(-5 (1 - min(e, T)/T)^2): ~0.0067 at epoch 0, exactly 1 from epoch T on."""
    T = sched.T if isinstance(sched, RampupSchedule) else float(sched)
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    t = min(float(epoch), T) / T
    return math.exp(-5.0 * (1.0 - t) ** 2)


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    norm = x.norm(dim=dim, keepdim=True)
    if bool((norm == 0).any()):
        raise FloatingPointError("zero-norm feature vector cannot be normalised")
    return x / norm


def patchnce_loss(query: torch.Tensor, positive: torch.Tensor, negatives: torch.Tensor,
                  tau: float = 0.07) -> torch.Tensor:
    """InfoNCE over patches: query [M, D], positive [M, D], negatives [M, N, D].

    Inputs are expected to be L2-normalised. Returns the mean over queries of the
    cross-entropy with the positive at index 0.
    """
    if query.shape != positive.shape or negatives.shape[0] != query.shape[0] \
            or negatives.shape[2] != query.shape[1]:
        raise ValueError("patchnce_loss: incompatible feature shapes")
    l_pos = (query * positive).sum(-1, keepdim=True)
    l_neg = torch.einsum("md,mnd->mn", query, negatives)
    logits = torch.cat([l_pos, l_neg], dim=1) / tau
    return F.cross_entropy(logits, torch.zeros(len(query), dtype=torch.long, device=query.device))


def patchnce_same_image(feat_q: torch.Tensor, feat_k: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    """PatchNCE where the negatives of each query are the other patches of the same image.

    ``feat_q``/``feat_k`` are [B, P, D] normalised projections of the translated and
    source image at the same P patch locations. Equivalent to :func:`patchnce_loss`
    with explicit negatives, computed from one [B, P, P] similarity matrix.
    """
    B, P, _ = feat_q.shape
    k = feat_k.detach()
    sim = torch.bmm(feat_q, k.transpose(1, 2))  # [B, P, P], positives on the diagonal
    l_pos = torch.diagonal(sim, dim1=1, dim2=2).reshape(B * P, 1)
    eye = torch.eye(P, dtype=torch.bool, device=sim.device)
    l_neg = sim.masked_fill(eye, float("-inf")).reshape(B * P, P)
    logits = torch.cat([l_pos, l_neg], dim=1) / tau
    return F.cross_entropy(logits, torch.zeros(B * P, dtype=torch.long, device=sim.device))


def lsgan_losses(disc_real: torch.Tensor | None, disc_fake: torch.Tensor):
    """Least-squares GAN terms: (mean((real-1)^2) + mean(fake^2), mean((fake-1)^2)).

    ``d_loss`` is None when no real scores are given (generator step).
    """
    g_loss = torch.mean((disc_fake - 1.0) ** 2)
    d_loss = None
    if disc_real is not None:
        d_loss = torch.mean((disc_real - 1.0) ** 2) + torch.mean(disc_fake ** 2)
    return d_loss, g_loss


def secut_seg_loss(tap_logits: Sequence[torch.Tensor], label: torch.Tensor,
                   w: SegLossWeights | Sequence[float] = SECUT_SEG_WEIGHTS) -> torch.Tensor:
    """Auxiliary segmentation loss on the (bottleneck, pre-downsample) decoder taps."""
    weights = w.secut_seg if isinstance(w, SegLossWeights) else tuple(w)
    if len(tap_logits) != 2 or len(weights) != 2:
        raise ValueError("expected exactly two tap predictions and two weights")
    return weights[0] * dice_ce_loss(tap_logits[0], label) + weights[1] * dice_ce_loss(tap_logits[1], label)
