"""Deterministic two-domain phantom benchmark.

Each case is an anatomy instance: a smooth tissue texture, one ellipsoidal VS
blob (class 1) and two small spherical cochlea blobs (class 2) placed left and
right of the midline, with the VS next to one of them. Source cases render the
anatomy directly. Target cases render a *different* anatomy instance and pass
it through :func:`domain_transform`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume_io import LabelMask, Volume, write_mvol

log = logging.getLogger(__name__)

SOURCE = "source"
TARGET = "target"
DOMAINS = (SOURCE, TARGET)

# source-domain rendering intensities: hyperintense VS, cochlea below the surrounding tissue
BACKGROUND_LEVEL = 0.6
TEXTURE_AMPLITUDE = 0.06
VS_LEVEL = 0.92
COCHLEA_LEVEL = 0.35
PLACEMENT_ATTEMPTS = 20


class PhantomConfigError(ValueError):
    pass


@dataclass
class DomainGap:
    gamma: float = 1.5
    bias_amplitude: float = 0.03


@dataclass
class PhantomConfig:
    seed: int = 0
    n_cases: int = 20
    dims: tuple[int, int, int] = (32, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 0.6, 0.6)
    vs_radius_range: tuple[float, float] = (4.0, 7.0)
    cochlea_radius_range: tuple[float, float] = (2.0, 3.0)
    noise_sigma: float = 0.02
    domain_gap: DomainGap = field(default_factory=DomainGap)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.vs_radius_range = tuple(float(r) for r in self.vs_radius_range)
        self.cochlea_radius_range = tuple(float(r) for r in self.cochlea_radius_range)
        if isinstance(self.domain_gap, dict):
            self.domain_gap = DomainGap(**self.domain_gap)
        if self.n_cases < 1:
            raise PhantomConfigError("n_cases must be >= 1")
        if self.noise_sigma < 0 or self.domain_gap.gamma <= 0 or self.domain_gap.bias_amplitude < 0:
            raise PhantomConfigError("invalid noise/domain-gap parameters")
        for lo, hi in (self.vs_radius_range, self.cochlea_radius_range):
            if not 0 < lo <= hi:
                raise PhantomConfigError("radius ranges must satisfy 0 < min <= max")
        z, y, x = self.dims
        # two cochleas and the VS must fit side by side along x, and fit in z and y
        rc, rv = self.cochlea_radius_range[1], self.vs_radius_range[1]
        if 2 * rv + 2 > min(z, y) or 4 * rc + 2 * rv + 6 > x:
            raise PhantomConfigError(f"blobs with radii {rv}/{rc} cannot be placed in dims {self.dims}")


@dataclass
class Case:
    id: str
    domain: str
    volume: Volume
    label: LabelMask | None = None


def case_seed(seed: int, index: int, domain: str) -> int:
    """Stable sub-seed; sha256 so adding cases never perturbs earlier ones."""
    digest = hashlib.sha256(f"crossuda-phantom:{seed}:{domain}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def case_id(index: int, domain: str) -> str:
    return f"{domain[0]}{index:03d}"


def _smooth_field(rng: np.random.Generator, dims, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=sigma, mode="wrap")
    peak = np.abs(f).max()
    return f / peak if peak > 0 else f


def _anatomy(cfg: PhantomConfig, rng: np.random.Generator):
    """Return (noiseless source render, label) for one random anatomy instance."""
    z, y, x = cfg.dims
    zz, yy, xx = np.meshgrid(np.arange(z), np.arange(y), np.arange(x), indexing="ij")
    label = np.zeros(cfg.dims, dtype=np.uint8)

    rc_lo, rc_hi = cfg.cochlea_radius_range
    rv_lo, rv_hi = cfg.vs_radius_range
    margin = rc_hi + 1
    # redraw on a failed placement; the first successful draw is kept
    for _ in range(PLACEMENT_ATTEMPTS):
        cz = rng.uniform(max(margin, rv_hi + 1), z - 1 - max(margin, rv_hi + 1))
        cy = rng.uniform(y / 2 - y / 8, y / 2 + y / 8)
        # cochleas sit at roughly 1/4 and 3/4 of the width
        cochleas = []
        for side in (0.25, 0.75):
            cx = rng.uniform(max(margin, x * side - x / 16), min(x - 1 - margin, x * side + x / 16))
            r = rng.uniform(rc_lo, rc_hi)
            center = (cz + rng.uniform(-1, 1), cy + rng.uniform(-2, 2), cx)
            cochleas.append((center, r))

        # VS medial to a randomly chosen cochlea, never touching it
        side = int(rng.integers(2))
        (ccz, ccy, ccx), cr = cochleas[side]
        radii = np.array([rng.uniform(rv_lo, rv_hi), rng.uniform(rv_lo, rv_hi), rng.uniform(rv_lo, rv_hi)])
        radii[0] = min(radii[0], (z - 2) / 2)
        direction = 1 if side == 0 else -1
        gap = cr + radii[2] + rng.uniform(1.5, 3.0)
        vcx = float(np.clip(ccx + direction * gap, radii[2], x - 1 - radii[2]))
        vcz = float(np.clip(ccz + rng.uniform(-2, 2), radii[0], z - 1 - radii[0]))
        vcy = float(np.clip(ccy + rng.uniform(-3, 3), radii[1], y - 1 - radii[1]))
        vs = (((zz - vcz) / radii[0]) ** 2 + ((yy - vcy) / radii[1]) ** 2
              + ((xx - vcx) / radii[2]) ** 2) <= 1.0

        coch_masks = [((zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2) <= r ** 2
                      for c, r in cochleas]
        grown = ndimage.binary_dilation(vs, iterations=1)
        if vs.any() and all(cm.any() for cm in coch_masks) and not any((grown & cm).any() for cm in coch_masks):
            break
    else:
        raise PhantomConfigError("blob placement failed for the configured dims/radii")
    label[vs] = 1
    for cm in coch_masks:
        label[cm] = 2

    render = BACKGROUND_LEVEL + TEXTURE_AMPLITUDE * _smooth_field(rng, cfg.dims, sigma=3.0)
    render[vs] = VS_LEVEL + 0.04 * _smooth_field(rng, cfg.dims, sigma=1.5)[vs]
    for cm in coch_masks:
        render[cm] = COCHLEA_LEVEL
    return render, label


def render_source(cfg: PhantomConfig, rng: np.random.Generator):
    render, label = _anatomy(cfg, rng)
    noisy = render + cfg.noise_sigma * rng.standard_normal(cfg.dims)
    return np.clip(noisy, 0.0, 1.0), label


def domain_transform(v: Volume, cfg: PhantomConfig, rng: np.random.Generator | None = None) -> Volume:
    """clamp((1 - v)^gamma + bias field + noise, 0, 1)."""
    data = v.data.astype(np.float64)
    if data.size and (data.min() < 0 or data.max() > 1):
        raise ValueError("domain_transform expects values in [0, 1]")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    out = (1.0 - data) ** cfg.domain_gap.gamma
    if cfg.domain_gap.bias_amplitude > 0:
        out = out + cfg.domain_gap.bias_amplitude * _bias_field(rng, data.shape)
    if cfg.noise_sigma > 0:
        out = out + cfg.noise_sigma * rng.standard_normal(data.shape)
    return Volume(np.clip(out, 0.0, 1.0), v.spacing)


def _bias_field(rng: np.random.Generator, dims) -> np.ndarray:
    # a single random low-frequency cosine per axis, peak amplitude 1
    grids = np.meshgrid(*[np.linspace(0, 1, d) for d in dims], indexing="ij")
    phase = rng.uniform(0, 2 * np.pi, size=3)
    freq = rng.uniform(0.3, 0.8, size=3)
    f = sum(np.cos(2 * np.pi * freq[i] * grids[i] + phase[i]) for i in range(3)) / 3.0
    return f


def generate_case(cfg: PhantomConfig, index: int, domain: str) -> Case:
    """Deterministic in (cfg, index, domain). Target cases carry their hidden ground truth."""
    if not 0 <= index < cfg.n_cases:
        raise IndexError(f"case index {index} outside 0..{cfg.n_cases - 1}")
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}")
    rng = np.random.default_rng(case_seed(cfg.seed, index, domain))
    if domain == SOURCE:
        data, label = render_source(cfg, rng)
        vol = Volume(data, cfg.spacing)
    else:
        render, label = _anatomy(cfg, rng)
        vol = domain_transform(Volume(render, cfg.spacing), cfg, rng)
    return Case(case_id(index, domain), domain, vol, LabelMask(label, cfg.spacing))


def config_to_dict(cfg: PhantomConfig) -> dict:
    return {
        "seed": cfg.seed, "n_cases": cfg.n_cases, "dims": list(cfg.dims), "spacing": list(cfg.spacing),
        "vs_radius_range": list(cfg.vs_radius_range), "cochlea_radius_range": list(cfg.cochlea_radius_range),
        "noise_sigma": cfg.noise_sigma,
        "domain_gap": {"gamma": cfg.domain_gap.gamma, "bias_amplitude": cfg.domain_gap.bias_amplitude},
    }


def generate_dataset(cfg: PhantomConfig, out_dir: str | Path, overwrite: bool = False):
    """Write the dataset under ``out_dir`` and return (source cases, target cases, hidden target labels).

    Layout: ``{source,target,target_gt_eval_only}/`` plus ``manifest.json``; target labels
    never appear in the manifest.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{out} already exists and is not empty")
        shutil.rmtree(out)
    for sub in (SOURCE, TARGET, "target_gt_eval_only"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    sources, targets, hidden, entries = [], [], {}, []
    for i in range(cfg.n_cases):
        case = generate_case(cfg, i, SOURCE)
        vpath, lpath = out / SOURCE / f"{case.id}.mvol", out / SOURCE / f"{case.id}_label.mvol"
        write_mvol(case.volume, vpath)
        write_mvol(case.label, lpath)
        sources.append(case)
        entries.append({"id": case.id, "domain": SOURCE, "volume_path": f"{SOURCE}/{vpath.name}",
                        "label_path": f"{SOURCE}/{lpath.name}"})
    for i in range(cfg.n_cases):
        case = generate_case(cfg, i, TARGET)
        vpath = out / TARGET / f"{case.id}.mvol"
        write_mvol(case.volume, vpath)
        write_mvol(case.label, out / "target_gt_eval_only" / f"{case.id}_label.mvol")
        hidden[case.id] = case.label
        targets.append(Case(case.id, TARGET, case.volume, None))
        entries.append({"id": case.id, "domain": TARGET, "volume_path": f"{TARGET}/{vpath.name}",
                        "label_path": None})
    manifest = {"config": config_to_dict(cfg), "cases": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    log.info("phantom: wrote %d source and %d target cases to %s", len(sources), len(targets), out)
    return sources, targets, hidden
