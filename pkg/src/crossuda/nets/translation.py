"""2D translation networks: ResNet generator with encoder taps and a dual-tap
segmentation decoder, PatchGAN discriminator, and the PatchNCE projection heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn



@dataclass
class GeneratorConfig:
    in_channels: int = 1
    n_downsamples: int = 2
    n_res_blocks: int = 4
    base_channels: int = 16
    n_classes: int = 3
    # encoder layer indices: 0 stem, 1..n_downsamples the downsampling convs, then one per res block
    nce_tap_layers: list[int] = field(default_factory=lambda: [0, 1, 2, 4])
    # (bottleneck, layer before the last downsampling); None means "derive from depth"
    seg_tap_layers: list[int] | None = None
    seg_decoder: bool = True

    def __post_init__(self):
        if self.seg_tap_layers is None:
            self.seg_tap_layers = [self.n_encoder_layers - 1, self.n_downsamples - 1]
        n = self.n_encoder_layers
        if any(not 0 <= i < n for i in list(self.nce_tap_layers) + list(self.seg_tap_layers)):
            raise ValueError(f"tap indices must lie in 0..{n - 1}")
        if len(self.seg_tap_layers) != 2:
            raise ValueError("seg_tap_layers needs exactly two indices")

    @property
    def n_encoder_layers(self) -> int:
        return 1 + self.n_downsamples + self.n_res_blocks


@dataclass
class DiscriminatorConfig:
    in_channels: int = 1
    base_channels: int = 16
    n_layers: int = 3


def _cnr(cin, cout, k, stride=1, pad=0, reflect=False):
    mode = "reflect" if reflect and pad else "zeros"
    return nn.Sequential(nn.Conv2d(cin, cout, k, stride, pad, padding_mode=mode),
                         nn.InstanceNorm2d(cout), nn.ReLU(inplace=True))


class ResBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=1, padding_mode="reflect"), nn.InstanceNorm2d(c), nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, padding=1, padding_mode="reflect"), nn.InstanceNorm2d(c))

    def forward(self, x):
        return x + self.body(x)


class SegDecoder(nn.Module):
    """One light branch per tap: conv-norm-relu, 1x1 logits, bilinear upsampling to input size."""

    def __init__(self, tap_channels: list[int], n_classes: int, hidden: int = 16):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Sequential(_cnr(c, hidden, 3, pad=1), nn.Conv2d(hidden, n_classes, 1)) for c in tap_channels)

    def forward(self, feats, size):
        return [F.interpolate(b(f), size=size, mode="bilinear", align_corners=False)
                for b, f in zip(self.branches, feats)]


class ResnetGenerator(nn.Module):
    """Maps [B,1,H,W] images in [0,1] to [0,1]; internally works in [-1,1] with a tanh output."""

    def __init__(self, cfg: GeneratorConfig, bypass: bool = False):
        super().__init__()
        self.cfg = cfg
        self.bypass = bypass
        b = cfg.base_channels
        enc = [_cnr(cfg.in_channels, b, 7, pad=3, reflect=True)]
        ch = [b]
        c = b
        for _ in range(cfg.n_downsamples):
            enc.append(_cnr(c, 2 * c, 3, stride=2, pad=1))
            c *= 2
            ch.append(c)
        for _ in range(cfg.n_res_blocks):
            enc.append(ResBlock(c))
            ch.append(c)
        self.encoder = nn.ModuleList(enc)
        self.layer_channels = ch
        dec = []
        for _ in range(cfg.n_downsamples):
            dec += [nn.ConvTranspose2d(c, c // 2, 3, stride=2, padding=1, output_padding=1),
                    nn.InstanceNorm2d(c // 2), nn.ReLU(inplace=True)]
            c //= 2
        dec += [nn.Conv2d(c, cfg.in_channels, 7, padding=3, padding_mode="reflect"), nn.Tanh()]
        self.decoder = nn.Sequential(*dec)
        self.seg_head = SegDecoder([ch[i] for i in cfg.seg_tap_layers], cfg.n_classes) if cfg.seg_decoder else None

    def _check(self, x):
        d = 2 ** self.cfg.n_downsamples
        if x.ndim != 4 or x.shape[-1] % d or x.shape[-2] % d:
            raise ValueError(f"input {tuple(x.shape)}: H and W must be divisible by {d}")

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        """All encoder layer activations for an image in [0,1]."""
        self._check(x)
        h = x * 2.0 - 1.0
        feats = []
        for layer in self.encoder:
            h = layer(h)
            feats.append(h)
        return feats

    def encoder_features(self, x: torch.Tensor, layers=None) -> list[torch.Tensor]:
        feats = self.encode(x)
        return [feats[i] for i in (self.cfg.nce_tap_layers if layers is None else layers)]

    def seg_decode(self, feats: list[torch.Tensor], size) -> list[torch.Tensor]:
        """Two logit maps at ``size``: (bottleneck tap, pre-downsample tap)."""
        if self.seg_head is None:
            raise RuntimeError("generator was built without a segmentation decoder")
        return self.seg_head([feats[i] for i in self.cfg.seg_tap_layers], size)

    def translate_from_features(self, feats: list[torch.Tensor]) -> torch.Tensor:
        return (self.decoder(feats[-1]) + 1.0) / 2.0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.bypass:
            self._check(x)
            return x
        return self.translate_from_features(self.encode(x))

    translate = forward


class PatchDiscriminator(nn.Module):
    """70x70-style PatchGAN scaled down; outputs a spatial map of real/fake scores."""

    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        cfg = cfg or DiscriminatorConfig()
        b = cfg.base_channels
        layers = [nn.Conv2d(cfg.in_channels, b, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True)]
        c = b
        for i in range(1, cfg.n_layers):
            stride = 2 if i < cfg.n_layers - 1 else 1
            layers += [nn.Conv2d(c, 2 * c, 4, stride, 1), nn.InstanceNorm2d(2 * c), nn.LeakyReLU(0.2, inplace=True)]
            c *= 2
        layers += [nn.Conv2d(c, 1, 4, 1, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x * 2.0 - 1.0)


NORM_EPS = 1e-7


class PatchSampleMLP(nn.Module):
    """Per-tap two-layer projection heads; samples the same patch locations for query and key."""

    def __init__(self, channels: list[int], nc: int = 256):
        super().__init__()
        self.mlps = nn.ModuleList(nn.Sequential(nn.Linear(c, nc), nn.ReLU(inplace=True), nn.Linear(nc, nc))
                                  for c in channels)

    def forward(self, feats: list[torch.Tensor], num_patches: int, patch_ids=None, generator=None):
        out, ids = [], []
        for k, f in enumerate(feats):
            B, C, H, W = f.shape
            flat = f.flatten(2).permute(0, 2, 1)  # [B, HW, C]
            if patch_ids is None:
                n = min(num_patches, H * W)
                pid = torch.randperm(H * W, generator=generator)[:n]
            else:
                pid = patch_ids[k]
            sample = self.mlps[k](flat[:, pid])
            # eps-guarded: flat image regions give exactly-zero projections
            out.append(sample / (sample.norm(dim=-1, keepdim=True) + NORM_EPS))
            ids.append(pid)
        return out, ids


def init_gan_weights(module: nn.Module, seed: int, std: float = 0.02) -> nn.Module:
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std, generator=g)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return module


def build_generator(cfg: GeneratorConfig, seed: int = 0, bypass: bool = False) -> ResnetGenerator:
    return init_gan_weights(ResnetGenerator(cfg, bypass=bypass), seed)


def build_discriminator(cfg: DiscriminatorConfig | None = None, seed: int = 1) -> PatchDiscriminator:
    return init_gan_weights(PatchDiscriminator(cfg), seed)


def build_patch_mlp(gen: ResnetGenerator, nc: int = 256, seed: int = 2) -> PatchSampleMLP:
    chans = [gen.layer_channels[i] for i in gen.cfg.nce_tap_layers]
    return init_gan_weights(PatchSampleMLP(chans, nc), seed)
