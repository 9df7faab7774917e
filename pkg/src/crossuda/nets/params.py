"""Flat parameter snapshots, the EMA teacher update and the checkpoint archive."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

CHECKPOINT_SCHEMA = "crossuda-checkpoint/1"
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class ModelParams:
    """Ordered name -> array mapping; order follows the model's ``state_dict``."""

    tensors: Mapping[str, np.ndarray]

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def signature(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, tuple(v.shape)) for k, v in self.tensors.items()]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def allclose(self, other: "ModelParams", atol: float = 0.0) -> bool:
        if self.signature() != other.signature():
            return False
        return all(np.allclose(self[k], other[k], rtol=0, atol=atol) for k in self.names)


def get_params(model: nn.Module) -> ModelParams:
    return ModelParams({k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()})


def set_params(model: nn.Module, params: ModelParams) -> nn.Module:
    state = model.state_dict()
    if [(k, tuple(v.shape)) for k, v in state.items()] != params.signature():
        raise ValueError("parameter names/shapes do not match the model")
    model.load_state_dict({k: torch.from_numpy(np.asarray(v)).to(state[k].dtype) for k, v in params.tensors.items()})
    return model


def ema_update(teacher: ModelParams, student: ModelParams, alpha: float) -> ModelParams:
    """Return alpha * teacher + (1 - alpha) * student, parameter by parameter."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if teacher.signature() != student.signature():
        raise ValueError("teacher and student parameter names/shapes differ")
    return ModelParams({k: alpha * teacher[k] + (1.0 - alpha) * student[k] for k in teacher.names})


@torch.no_grad()
def ema_update_model(teacher: nn.Module, student: nn.Module, alpha: float) -> None:
    """In-place version of :func:`ema_update` on live models (floating tensors only)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    t_state, s_state = teacher.state_dict(), student.state_dict()
    if list(t_state) != list(s_state):
        raise ValueError("teacher and student parameter names differ")
    for k, t in t_state.items():
        s = s_state[k]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {k}")
        if t.is_floating_point():
            t.mul_(alpha).add_(s, alpha=1.0 - alpha)
        else:
            t.copy_(s)


# --------------------------------------------------------------------------- #
# Checkpoint archive: a zip of .npy members plus meta.json, with fixed timestamps
# so identical contents give identical bytes.
# --------------------------------------------------------------------------- #

@dataclass
class Checkpoint:
    groups: dict[str, ModelParams]
    meta: dict = field(default_factory=dict)

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))


@dataclass
class CheckpointPair:
    student: ModelParams
    teacher: ModelParams
    epoch: int
    optimizer_state: ModelParams = field(default_factory=lambda: ModelParams({}))
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.student.signature() != self.teacher.signature():
            raise ValueError("student and teacher must share names and shapes")

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint({"student": self.student, "teacher": self.teacher, "optimizer": self.optimizer_state},
                          {"kind": "mean_teacher", "epoch": self.epoch, "config": self.config})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "CheckpointPair":
        if ckpt.meta.get("kind") != "mean_teacher":
            raise ValueError(f"not a mean-teacher checkpoint: kind={ckpt.meta.get('kind')!r}")
        return cls(ckpt.groups["student"], ckpt.groups["teacher"], ckpt.epoch,
                   ckpt.groups.get("optimizer", ModelParams({})), ckpt.meta.get("config", {}))


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    meta = {"schema": CHECKPOINT_SCHEMA, **ckpt.meta,
            "groups": {g: p.names for g, p in ckpt.groups.items()}}
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for g, params in ckpt.groups.items():
            for i, (name, arr) in enumerate(params.tensors.items()):
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
                _zip_write(zf, f"{g}/{i:05d}.npy", buf.getvalue())


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise ValueError(f"{path}: not a checkpoint archive") from exc
    with zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("schema") != CHECKPOINT_SCHEMA:
            raise ValueError(f"{path}: unsupported checkpoint schema {meta.get('schema')!r}")
        groups = {}
        for g, names in meta.pop("groups").items():
            tensors = {}
            for i, name in enumerate(names):
                tensors[name] = np.lib.format.read_array(io.BytesIO(zf.read(f"{g}/{i:05d}.npy")), allow_pickle=False)
            groups[g] = ModelParams(tensors)
    return Checkpoint(groups, meta)


def optimizer_state_params(model: nn.Module, opt: torch.optim.Optimizer) -> ModelParams:
    """SGD momentum buffers keyed by parameter name."""
    out = {}
    for name, p in model.named_parameters():
        buf = opt.state.get(p, {}).get("momentum_buffer")
        if buf is not None:
            out[name] = buf.detach().cpu().numpy().copy()
    return ModelParams(out)
