"""Inference: ensemble-averaged softmax, argmax, optional largest-component filtering."""

from __future__ import annotations

from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..metrics import lcc_filter
from ..nets.unet import UNet3D
from ..volume_io import LabelMask, Volume
from .segmenter import load_unet, predict_probs

ProbHook = Callable[[np.ndarray], np.ndarray]


def load_ensemble(paths: Sequence[Path], network: str | None = None) -> list[UNet3D]:
    """Load fold checkpoints; for mean-teacher pairs ``network`` picks teacher (default) or student."""
    if not paths:
        raise ValueError("no checkpoints to ensemble")
    return [load_unet(Path(p), network) for p in paths]


def predict(models: Sequence[UNet3D], volume: Volume, postprocess: bool = True,
            prob_hook: ProbHook | None = None) -> LabelMask:
    """Label map for one preprocessed volume.

    ``prob_hook`` receives the averaged [C, Z, Y, X] probabilities and may return a
    modified array; it exists so tests can inject predictions with known structure.
    """
    probs = predict_probs(models, volume)
    if prob_hook is not None:
        probs = prob_hook(probs)
    label = LabelMask(probs.argmax(0).astype(np.uint8), volume.spacing)
    return lcc_filter(label) if postprocess else label
