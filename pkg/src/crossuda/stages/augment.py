"""Structure-guided intensity augmentation of the synthetic target images."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..volume_io import LabelMask, Volume
from .common import LabeledCase

VS_SCALE = 0.5  # muted
COCHLEA_SCALE = 1.5  # intensified


def intensity_augment(v: Volume, m: LabelMask, vs_scale: float = VS_SCALE,
                      cochlea_scale: float = COCHLEA_SCALE) -> Volume:
    """Scale VS voxels by ``vs_scale`` and cochlea voxels by ``cochlea_scale``, clamped to [0, 1]."""
    if m.shape != v.shape:
        raise ValueError(f"mask shape {m.shape} does not match volume shape {v.shape}")
    out = v.data.copy()
    vs, co = m.data == 1, m.data == 2
    out[vs] = np.clip(out[vs] * np.float32(vs_scale), 0.0, 1.0)
    out[co] = np.clip(out[co] * np.float32(cochlea_scale), 0.0, 1.0)
    return Volume(out, v.spacing)


def augment_cases(cases: Sequence[LabeledCase], mode: str = "paired") -> list[LabeledCase]:
    """Return the augmented copies only; ``paired`` gives one per case, ``split`` two."""
    out = []
    for c in cases:
        if mode == "paired":
            out.append(LabeledCase(f"{c.id}_ia", intensity_augment(c.volume, c.label), c.label, c.group))
        elif mode == "split":
            out.append(LabeledCase(f"{c.id}_iamute", intensity_augment(c.volume, c.label, VS_SCALE, VS_SCALE),
                                   c.label, c.group))
            out.append(LabeledCase(f"{c.id}_iaboost",
                                   intensity_augment(c.volume, c.label, COCHLEA_SCALE, COCHLEA_SCALE),
                                   c.label, c.group))
        else:
            raise ValueError(f"unknown augmentation mode {mode!r}")
    return out
