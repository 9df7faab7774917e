"""Volume containers, the MVOL file format and the preprocessing chain.

Arrays are always stored in (z, y, x) order. Spacing is (sz, sy, sx) in mm.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"MVOL1\n"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
N_CLASSES = 3


class MVOLError(ValueError):
    """Base class for MVOL read errors."""


class MVOLFormatError(MVOLError):
    pass


class MVOLTruncatedError(MVOLError):
    pass


class InvalidSpacingError(MVOLError):
    pass


def _check_spacing(spacing: Sequence[float]) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
        raise InvalidSpacingError(f"spacing must be three positive numbers, got {spacing!r}")
    return sp  # type: ignore[return-value]


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3D with every dim >= 1, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        self.data = data
        self.spacing = _check_spacing(self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def __eq__(self, other):
        return (type(other) is type(self) and self.spacing == other.spacing
                and self.data.shape == other.data.shape and np.array_equal(self.data, other.data))


@dataclass
class LabelMask:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"mask data must be 3D with every dim >= 1, got shape {data.shape}")
        if data.size and (data.min() < 0 or data.max() >= N_CLASSES):
            raise ValueError(f"mask values must lie in 0..{N_CLASSES - 1}")
        self.data = data.astype(np.uint8)
        self.spacing = _check_spacing(self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def __eq__(self, other):
        return (type(other) is type(self) and self.spacing == other.spacing
                and self.data.shape == other.data.shape and np.array_equal(self.data, other.data))


@dataclass
class Slice2D:
    data: np.ndarray
    source_case_id: str
    z_index: int


# --------------------------------------------------------------------------- #
# MVOL format
# --------------------------------------------------------------------------- #

def write_mvol(obj: Volume | LabelMask, path: str | Path) -> None:
    """Write a volume or mask as MVOL: magic, one JSON header line, blank line, raw payload."""
    path = Path(path)
    if isinstance(obj, LabelMask):
        dtype_name = "u8"
    elif isinstance(obj, Volume):
        dtype_name = "f32"
    else:
        raise TypeError(f"expected Volume or LabelMask, got {type(obj).__name__}")
    header = {
        "dims": list(obj.shape),
        "spacing": list(obj.spacing),
        "dtype": dtype_name,
        "byte_order": "little",
    }
    payload = np.ascontiguousarray(obj.data, dtype=_DTYPES[dtype_name]).tobytes(order="C")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(json.dumps(header).encode("utf-8") + b"\n\n")
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"failed to write MVOL file {path}: {exc}") from exc


def read_mvol(path: str | Path) -> Volume | LabelMask:
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise MVOLFormatError(f"{path}: bad magic")
    rest = raw[len(MAGIC):]
    end = rest.find(b"\n\n")
    if end < 0:
        raise MVOLFormatError(f"{path}: header not terminated")
    try:
        header = json.loads(rest[:end].decode("utf-8"))
        dims = tuple(int(d) for d in header["dims"])
        dtype_name = header["dtype"]
        spacing = header["spacing"]
        byte_order = header["byte_order"]
    except (ValueError, KeyError, TypeError) as exc:
        raise MVOLFormatError(f"{path}: malformed header ({exc})") from exc
    if dtype_name not in _DTYPES or byte_order != "little" or len(dims) != 3 or min(dims) < 1:
        raise MVOLFormatError(f"{path}: unsupported header {header}")
    _check_spacing(spacing)
    dtype = _DTYPES[dtype_name]
    payload = rest[end + 2:]
    n_bytes = int(np.prod(dims)) * dtype.itemsize
    if len(payload) < n_bytes:
        raise MVOLTruncatedError(f"{path}: payload has {len(payload)} bytes, expected {n_bytes}")
    if len(payload) > n_bytes:
        raise MVOLFormatError(f"{path}: trailing bytes after payload")
    data = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if dtype_name == "u8":
        return LabelMask(data, tuple(spacing))
    return Volume(data.astype(np.float32), tuple(spacing))


# --------------------------------------------------------------------------- #
# Preprocessing
# --------------------------------------------------------------------------- #

def _axis_linear(n_in: int, n_out: int, ratio: float):
    # output index i sits at input coordinate i * ratio (shared origin), clamped to the grid
    coords = np.clip(np.arange(n_out) * ratio, 0.0, n_in - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return coords, lo, hi, coords - lo


def resample_volume(v: Volume | LabelMask, target_spacing: Sequence[float],
                    mode: str = "image") -> Volume | LabelMask:
    """Resample to ``target_spacing``: trilinear for ``mode="image"``, nearest for ``"label"``."""
    if mode not in ("image", "label"):
        raise ValueError(f"mode must be 'image' or 'label', got {mode!r}")
    try:
        target = _check_spacing(target_spacing)
    except InvalidSpacingError as exc:
        raise ValueError(str(exc)) from exc
    if target == v.spacing:
        return type(v)(v.data.copy(), v.spacing)

    out = v.data.astype(np.float64) if mode == "image" else v.data
    for axis in range(3):
        n_in = out.shape[axis]
        ratio = target[axis] / v.spacing[axis]
        n_out = max(1, int(round(n_in * v.spacing[axis] / target[axis])))
        coords, lo, hi, frac = _axis_linear(n_in, n_out, ratio)
        if mode == "label":
            idx = np.floor(coords + 0.5).astype(np.int64).clip(0, n_in - 1)
            out = np.take(out, idx, axis=axis)
        else:
            shape = [1, 1, 1]
            shape[axis] = n_out
            w = frac.reshape(shape)
            out = np.take(out, lo, axis=axis) * (1.0 - w) + np.take(out, hi, axis=axis) * w
    if mode == "label":
        return LabelMask(out, target)
    return Volume(out, target)


def minmax_normalize(v: Volume) -> Volume:
    lo, hi = float(v.data.min()), float(v.data.max())
    if hi == lo:
        return Volume(np.zeros_like(v.data), v.spacing)
    d = v.data.astype(np.float64)
    return Volume((d - lo) / (hi - lo), v.spacing)


@dataclass
class CropResult:
    volume: Volume
    mask: LabelMask | None
    offset: tuple[int, int]  # (row, col) of the window origin in input coordinates
    fallback: bool = False
    threshold: float = field(default=0.0)


def crop_window(data: np.ndarray, offset: tuple[int, int], size: tuple[int, int]) -> np.ndarray:
    """Cut a (size_y, size_x) window at ``offset`` from every z slice, zero-padding outside."""
    r0, c0 = offset
    sy, sx = size
    z, y, x = data.shape
    out = np.zeros((z, sy, sx), dtype=data.dtype)
    rs, re = max(r0, 0), min(r0 + sy, y)
    cs, ce = max(c0, 0), min(c0 + sx, x)
    if rs < re and cs < ce:
        out[:, rs - r0:re - r0, cs - c0:ce - c0] = data[:, rs:re, cs:ce]
    return out


def percentile_crop(v: Volume, m: LabelMask | None = None, percentile: float = 75.0,
                    size: tuple[int, int] = (256, 256)) -> CropResult:
    """Crop a fixed xy window centered on the centroid of voxels above the intensity percentile.

    The window is the same for every slice. When no voxel exceeds the threshold the
    volume center is used and ``fallback`` is set.
    """
    if m is not None and m.shape != v.shape:
        raise ValueError(f"mask shape {m.shape} does not match volume shape {v.shape}")
    sy, sx = int(size[0]), int(size[1])
    t = float(np.percentile(v.data, percentile))
    fg = np.argwhere(v.data > t)
    fallback = fg.size == 0
    if fallback:
        cy, cx = v.shape[1] // 2, v.shape[2] // 2
    else:
        cy, cx = (int(round(c)) for c in fg[:, 1:].mean(axis=0))
    offset = (cy - sy // 2, cx - sx // 2)
    vol = Volume(crop_window(v.data, offset, (sy, sx)), v.spacing)
    mask = LabelMask(crop_window(m.data, offset, (sy, sx)), m.spacing) if m is not None else None
    return CropResult(vol, mask, offset, fallback, t)


def slice_volume(v: Volume, case_id: str = "") -> list[Slice2D]:
    return [Slice2D(v.data[k].copy(), case_id, k) for k in range(v.shape[0])]


def restack_slices(slices: Sequence[Slice2D], spacing: Sequence[float]) -> Volume:
    if not slices:
        raise ValueError("no slices to restack")
    shape = slices[0].data.shape
    if any(s.data.shape != shape for s in slices):
        raise ValueError("slices have differing shapes")
    order = sorted(slices, key=lambda s: s.z_index)
    if [s.z_index for s in order] != list(range(len(slices))):
        raise ValueError("slice z indices must form 0..n-1")
    return Volume(np.stack([s.data for s in order]), tuple(spacing))
