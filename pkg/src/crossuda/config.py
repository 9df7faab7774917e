"""Run configuration: nested dataclasses loaded from YAML/JSON with unknown keys rejected.

Defaults reproduce the published hyperparameters; ``configs/desk.yaml`` scales the
schedules down for a single CPU.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .losses import DEFAULT_CONSISTENCY_WEIGHTS, SECUT_SEG_WEIGHTS
from .nets.unet import UNetConfig
from .phantom import PhantomConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    # the last n target cases are held out for evaluation and never seen in training
    n_holdout_target: int = 8


@dataclass
class PreprocessConfig:
    spacing: tuple[float, float, float] = (1.0, 0.6, 0.6)
    crop_size: tuple[int, int] = (256, 256)
    percentile: float = 75.0


@dataclass
class SecutConfig:
    epochs: int = 400
    iters_per_epoch: int | None = None
    batch_size: int = 1
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    n_res_blocks: int = 9
    base_channels: int = 64
    disc_channels: int = 64
    disc_layers: int = 3
    nce_layers: list[int] = field(default_factory=lambda: [0, 1, 2, 4])
    nce_tau: float = 0.07
    num_patches: int = 256
    mlp_dim: int = 256
    nce_idt: bool = True
    # top-level weights are equal for the adversarial, contrastive and segmentation terms
    lambda_gan: float = 1.0
    lambda_nce: float = 1.0
    lambda_seg: float = 1.0
    seg_weights: tuple[float, float] = SECUT_SEG_WEIGHTS


@dataclass
class Perturbation:
    noise_sigma: float = 0.05
    dropout: bool = True


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 2
    lr: float = 0.01
    momentum: float = 0.99
    weight_decay: float = 3e-5
    nesterov: bool = True
    poly_exponent: float = 0.9
    iters_per_epoch: int | None = None
    ema_alpha: float = 0.9
    rampup_epochs: float = 160
    consistency_weights: tuple[float, ...] = DEFAULT_CONSISTENCY_WEIGHTS
    perturbation: Perturbation = field(default_factory=Perturbation)
    k_folds: int = 5
    snapshot_every: int = 0
    unet: UNetConfig = field(default_factory=UNetConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not 0 <= self.ema_alpha <= 1:
            raise ConfigError("epochs and batch_size must be >= 1 and ema_alpha within [0, 1]")


def _segmenter_default() -> TrainConfig:
    return TrainConfig(epochs=200)


@dataclass
class Flags:
    use_translation: bool = True
    use_secut_seg_decoder: bool = True
    use_ia: bool = True
    # "paired": VS x0.5 and cochlea x1.5 in one copy (doubles the set);
    # "split": one all-muted and one all-intensified copy (triples it)
    ia_mode: str = "paired"
    use_pl: bool = True
    use_mt: bool = True
    multiscale_mt: bool = True

    def __post_init__(self):
        if self.ia_mode not in ("paired", "split"):
            raise ConfigError("ia_mode must be 'paired' or 'split'")
        if self.use_mt and not self.use_pl:
            raise ConfigError("use_mt requires use_pl (the mean teacher trains on the pseudo-labeled pool)")


@dataclass
class PredictConfig:
    postprocess: bool = True
    units: str = "voxel"


ABLATION_LADDER = (
    "CUT", "CUT+IA", "CUT+IA+PL", "CUT+IA+PL+MT", "CUT+IA+PL+MS-MT", "SE-CUT+IA+PL+MS-MT",
)


@dataclass
class AblationConfig:
    rows: list[str] = field(default_factory=lambda: list(ABLATION_LADDER))
    include_baseline: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    secut: SecutConfig = field(default_factory=SecutConfig)
    segmenter: TrainConfig = field(default_factory=_segmenter_default)
    msmt: TrainConfig = field(default_factory=TrainConfig)
    flags: Flags = field(default_factory=Flags)
    predict: PredictConfig = field(default_factory=PredictConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        unknown = [r for r in self.ablation.rows if r not in ABLATION_LADDER]
        if unknown:
            raise ConfigError(f"unknown ablation rows {unknown}; valid: {list(ABLATION_LADDER)}")
        if self.data.n_holdout_target >= self.phantom.n_cases:
            raise ConfigError("n_holdout_target must leave at least one unlabeled target training case")
        if self.predict.units not in ("voxel", "mm"):
            raise ConfigError("predict.units must be 'voxel' or 'mm'")


# --------------------------------------------------------------------------- #
# dict <-> dataclass
# --------------------------------------------------------------------------- #

def _convert(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if isinstance(value, tp):
            return value
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return from_dict(tp, value, where)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        non_none = [a for a in args if a is not type(None)]
        return _convert(non_none[0], value, where)
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        args = typing.get_args(tp)
        inner = args[0] if args else typing.Any
        items = [_convert(inner, v, f"{where}[{i}]") for i, v in enumerate(value)]
        if origin is tuple and args and args[-1] is not Ellipsis and len(args) != len(items):
            raise ConfigError(f"{where}: expected {len(args)} items, got {len(items)}")
        return tuple(items) if origin is tuple else items
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads exponent literals without a dot (3e-5) as strings
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{where}: expected a number") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def from_dict(cls, data: dict, where: str = "config"):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def to_dict(obj) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        return v
    return conv(obj)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    text = path.read_text()
    data = json.loads(text) if path.suffix == ".json" else (yaml.safe_load(text) or {})
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(RunConfig, data)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True))


def replace_flags(cfg: RunConfig, **flags) -> RunConfig:
    return dataclasses.replace(cfg, flags=dataclasses.replace(cfg.flags, **flags))


def config_hash(*parts) -> str:
    blob = json.dumps([to_dict(p) if dataclasses.is_dataclass(p) else p for p in parts], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]
