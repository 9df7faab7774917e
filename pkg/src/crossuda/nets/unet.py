"""Fixed multi-scale 3D U-Net used as segmenter, student and teacher."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class UNetConfig:
    in_channels: int = 1
    n_classes: int = 3
    n_levels: int = 5
    base_channels: int = 8
    max_channels: int = 64
    n_output_scales: int = 5
    dropout: float = 0.1
    convs_per_level: int = 2

    def __post_init__(self):
        if not 1 <= self.n_output_scales <= self.n_levels:
            raise ValueError("n_output_scales must be between 1 and n_levels")
        if self.n_classes < 2 or self.base_channels < 1:
            raise ValueError("invalid U-Net config")

    @property
    def divisor(self) -> int:
        return 2 ** (self.n_levels - 1)


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int, n_convs: int, stride: int = 1):
        layers = []
        for i in range(n_convs):
            layers += [nn.Conv3d(cin if i == 0 else cout, cout, 3, stride=stride if i == 0 else 1, padding=1),
                       nn.InstanceNorm3d(cout, affine=True),
                       nn.LeakyReLU(0.01, inplace=True)]
        super().__init__(*layers)


class UNet3D(nn.Module):
    """Encoder-decoder with skips and one 1x1x1 logit head per output scale.

    ``forward`` returns a list of logit maps ordered full resolution first, i.e.
    scale s has spatial dims input / 2**s.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        ch = [min(cfg.base_channels * 2 ** i, cfg.max_channels) for i in range(cfg.n_levels)]
        self.channels = ch
        self.encoder = nn.ModuleList(
            ConvBlock(cfg.in_channels if i == 0 else ch[i - 1], ch[i], cfg.convs_per_level, stride=1 if i == 0 else 2)
            for i in range(cfg.n_levels))
        self.up = nn.ModuleList(nn.ConvTranspose3d(ch[i + 1], ch[i], 2, stride=2) for i in range(cfg.n_levels - 1))
        self.decoder = nn.ModuleList(ConvBlock(2 * ch[i], ch[i], cfg.convs_per_level) for i in range(cfg.n_levels - 1))
        self.drop = nn.Dropout3d(cfg.dropout) if cfg.dropout > 0 else nn.Identity()
        # heads[s] predicts at scale s
        self.heads = nn.ModuleList(nn.Conv3d(ch[s], cfg.n_classes, 1) for s in range(cfg.n_output_scales))
        self._deterministic = False

    def deterministic(self, mode: bool = True) -> "UNet3D":
        """Disable (or re-enable) dropout independently of train/eval mode."""
        self._deterministic = mode
        return self

    def _dropout(self, x: torch.Tensor) -> torch.Tensor:
        if self._deterministic or not self.training:
            return x
        return self.drop(x)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        d = self.cfg.divisor
        if x.ndim != 5 or any(s % d for s in x.shape[2:]):
            raise ValueError(f"input spatial dims {tuple(x.shape[2:])} must be divisible by {d}")
        skips = []
        for i, block in enumerate(self.encoder):
            x = block(x)
            if i >= 2:
                x = self._dropout(x)
            skips.append(x)
        n = self.cfg.n_levels
        outs: dict[int, torch.Tensor] = {}
        if n - 1 < self.cfg.n_output_scales:
            outs[n - 1] = self.heads[n - 1](x)
        for i in reversed(range(n - 1)):
            x = self.up[i](x)
            x = self.decoder[i](torch.cat([x, skips[i]], dim=1))
            if i >= 1:
                x = self._dropout(x)
            if i < self.cfg.n_output_scales:
                outs[i] = self.heads[i](x)
        return [outs[s] for s in range(self.cfg.n_output_scales)]


def init_unet(model: UNet3D, seed: int) -> UNet3D:
    """He-style init from a private generator so initial weights depend on ``seed`` only."""
    g = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.kaiming_normal_(m.weight, a=0.01, generator=g)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.InstanceNorm3d) and m.affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    return model


def build_unet3d(cfg: UNetConfig, seed: int = 0) -> UNet3D:
    return init_unet(UNet3D(cfg), seed)


def softmax_outputs(outputs: list[torch.Tensor]) -> list[torch.Tensor]:
    return [F.softmax(o, dim=1) for o in outputs]
