"""Dice, ASSD, connected-component post-processing and report aggregation.

Connectivity is 6 (face neighbours) everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .volume_io import LabelMask

FACE = ndimage.generate_binary_structure(3, 1)
CLASS_NAMES = {1: "vs", 2: "cochlea"}
# components kept per class by the post-processing rule
KEEP_COMPONENTS = {1: 1, 2: 2}


def _as_bool(m) -> np.ndarray:
    if isinstance(m, LabelMask):
        raise TypeError("pass a per-class boolean mask, e.g. label.data == 1")
    return np.asarray(m, dtype=bool)


def dice(pred, gt) -> float:
    """2|P & G| / (|P| + |G|); 1.0 when both masks are empty."""
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def surface_mask(m) -> np.ndarray:
    m = _as_bool(m)
    if not m.any():
        return np.zeros_like(m)
    # out-of-bounds counts as outside, hence border_value=0
    interior = ndimage.binary_erosion(m, structure=FACE, border_value=0)
    return m & ~interior


def surface_voxels(m) -> set[tuple[int, ...]]:
    return {tuple(int(c) for c in idx) for idx in np.argwhere(surface_mask(m))}


def assd(pred, gt, units: str = "voxel", spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float | None:
    """Average symmetric surface distance, or ``None`` if either mask is empty.

    ``units="mm"`` scales coordinates by ``spacing`` before measuring distances.
    """
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if units not in ("voxel", "mm"):
        raise ValueError(f"units must be 'voxel' or 'mm', got {units!r}")
    if not p.any() or not g.any():
        return None
    sampling = tuple(float(s) for s in spacing) if units == "mm" else (1.0,) * p.ndim
    sp, sg = surface_mask(p), surface_mask(g)
    # distance from every voxel to the nearest surface voxel of the other mask
    d_to_g = ndimage.distance_transform_edt(~sg, sampling=sampling)
    d_to_p = ndimage.distance_transform_edt(~sp, sampling=sampling)
    total = d_to_g[sp].sum() + d_to_p[sg].sum()
    return float(total / (sp.sum() + sg.sum()))


def connected_components(m) -> list[np.ndarray]:
    """Face-connected components as (n, 3) coordinate arrays, largest first.

    Equal sizes are ordered by their lexicographically smallest coordinate.
    """
    m = _as_bool(m)
    labels, n = ndimage.label(m, structure=FACE)
    if n == 0:
        return []
    coords = np.argwhere(labels)  # row-major order, so first hit per label is its lexicographic min
    ids = labels[tuple(coords.T)]
    order = np.argsort(ids, kind="stable")
    coords, ids = coords[order], ids[order]
    splits = np.flatnonzero(np.diff(ids)) + 1
    comps = np.split(coords, splits)
    comps.sort(key=lambda c: (-len(c), tuple(c[0])))
    return comps


def lcc_filter(label: LabelMask | np.ndarray) -> LabelMask | np.ndarray:
    """Keep the largest VS component and the two largest cochlea components."""
    data = label.data if isinstance(label, LabelMask) else np.asarray(label)
    out = data.copy()
    for cls, keep in KEEP_COMPONENTS.items():
        for comp in connected_components(data == cls)[keep:]:
            out[tuple(comp.T)] = 0
    if isinstance(label, LabelMask):
        return LabelMask(out, label.spacing)
    return out


# --------------------------------------------------------------------------- #
# Reports
# --------------------------------------------------------------------------- #

@dataclass
class CaseMetrics:
    case_id: str
    classes: dict[str, dict[str, float | None]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"case_id": self.case_id, **self.classes}


def evaluate_case(case_id: str, pred: LabelMask, gt: LabelMask, units: str = "voxel") -> CaseMetrics:
    if pred.shape != gt.shape:
        raise ValueError(f"{case_id}: prediction shape {pred.shape} != ground truth {gt.shape}")
    res = {}
    for cls, name in CLASS_NAMES.items():
        p, g = pred.data == cls, gt.data == cls
        res[name] = {"dice": dice(p, g), "assd": assd(p, g, units=units, spacing=gt.spacing)}
    return CaseMetrics(case_id, res)


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())  # population std


@dataclass
class MetricsReport:
    per_case: list[CaseMetrics]
    aggregate: dict[str, dict[str, float | None]]
    assd_exclusions: int
    units: str = "voxel"

    def to_dict(self) -> dict:
        return {"per_case": [c.to_dict() for c in self.per_case], "aggregate": self.aggregate,
                "assd_exclusions": self.assd_exclusions, "units": self.units}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @property
    def mean_dice(self) -> float:
        return self.aggregate["mean"]["dice_mean"]


def aggregate_report(per_case: Iterable[CaseMetrics], units: str = "voxel") -> MetricsReport:
    """Mean and population std per class; undefined ASSDs are excluded and tallied."""
    per_case = list(per_case)
    if not per_case:
        raise ValueError("aggregate_report needs at least one case")
    agg: dict[str, dict[str, float | None]] = {}
    exclusions = 0
    for name in CLASS_NAMES.values():
        dices = [c.classes[name]["dice"] for c in per_case]
        assds = [c.classes[name]["assd"] for c in per_case if c.classes[name]["assd"] is not None]
        exclusions += len(per_case) - len(assds)
        d_mean, d_std = _mean_std(dices)
        a_mean, a_std = _mean_std(assds)
        agg[name] = {"dice_mean": d_mean, "dice_std": d_std, "assd_mean": a_mean, "assd_std": a_std,
                     "assd_excluded": len(per_case) - len(assds)}
    case_means = [float(np.mean([c.classes[n]["dice"] for n in CLASS_NAMES.values()])) for c in per_case]
    m_mean, m_std = _mean_std(case_means)
    agg["mean"] = {"dice_mean": m_mean, "dice_std": m_std}
    return MetricsReport(per_case, agg, exclusions, units)


def load_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
