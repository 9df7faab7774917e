"""Shared plumbing for the pipeline stages: manifests, loss logs, seeds, batching."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from ..volume_io import LabelMask, Volume, read_mvol, write_mvol

log = logging.getLogger("crossuda")


class StageInputError(FileNotFoundError):
    """A stage was asked to run before the artifact it consumes exists."""


class TrainingDiverged(FloatingPointError):
    pass


def derive_seed(seed: int, *parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in (seed, *parts)).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


@dataclass
class LabeledCase:
    id: str
    volume: Volume
    label: LabelMask | None = None
    group: str = ""  # fold-grouping key; augmented copies share their original's group

    def __post_init__(self):
        if not self.group:
            self.group = self.id


def case_entry(case_id: str, volume_path: str, label_path: str | None, group: str | None = None) -> dict:
    return {"id": case_id, "volume_path": volume_path, "label_path": label_path, "group": group or case_id}


def write_manifest(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def read_manifest(path: Path) -> dict:
    if not path.exists():
        raise StageInputError(f"missing stage artifact: {path}")
    return json.loads(path.read_text())


def load_cases(entries: Iterable[dict], root: Path) -> list[LabeledCase]:
    cases = []
    for e in entries:
        vp = root / e["volume_path"]
        if not vp.exists():
            raise StageInputError(f"missing stage artifact: {vp}")
        label = read_mvol(root / e["label_path"]) if e.get("label_path") else None
        cases.append(LabeledCase(e["id"], read_mvol(vp), label, e.get("group") or e["id"]))
    return cases


def save_case(case: LabeledCase, out_dir: Path, rel_root: Path, suffix: str = "") -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    vp = out_dir / f"{case.id}{suffix}.mvol"
    write_mvol(case.volume, vp)
    lp = None
    if case.label is not None:
        lp = out_dir / f"{case.id}{suffix}_label.mvol"
        write_mvol(case.label, lp)
    return case_entry(case.id, str(vp.relative_to(rel_root)), str(lp.relative_to(rel_root)) if lp else None,
                      case.group)


class CSVLog:
    """Append-only CSV writer with a fixed header; floats written with repr for exact replay."""

    def __init__(self, path: Path, columns: Sequence[str]):
        self.path = Path(path)
        self.columns = list(columns)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(self.columns)

    def row(self, **values) -> None:
        self._w.writerow([_fmt(values.get(c, "")) for c in self.columns])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def fold_assignment(groups: Sequence[str], k: int, seed: int) -> dict[str, int]:
    """Round-robin folds over groups ordered by a seeded sha256 of the group id."""
    uniq = sorted(set(groups))
    if k < 1:
        raise ValueError("k_folds must be >= 1")
    if len(uniq) < k:
        raise ValueError(f"{len(uniq)} cases cannot be split into {k} folds")
    order = sorted(uniq, key=lambda g: hashlib.sha256(f"{seed}:{g}".encode()).hexdigest())
    return {g: i % k for i, g in enumerate(order)}


def to_tensor(vol: Volume) -> torch.Tensor:
    return torch.from_numpy(vol.data[None].astype(np.float32))


def stack_batch(cases: Sequence[LabeledCase]):
    x = torch.stack([to_tensor(c.volume) for c in cases])
    y = torch.stack([torch.from_numpy(c.label.data.astype(np.int64)) for c in cases])
    return x, y


def poly_lr(base_lr: float, epoch: int, total_epochs: int, exponent: float = 0.9) -> float:
    return base_lr * (1.0 - epoch / total_epochs) ** exponent


def check_finite(value: torch.Tensor, what: str) -> None:
    if not torch.isfinite(value).all():
        raise TrainingDiverged(f"non-finite {what}")


@dataclass
class StageResult:
    stage: str
    out_dir: Path
    artifacts: dict = field(default_factory=dict)
