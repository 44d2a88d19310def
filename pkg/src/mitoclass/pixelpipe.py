"""
Pixelpipe: deterministic image kernels and the seeded augmentation policy.

Images are float64 arrays laid out H x W x C with values in [0, 1] until
normalization. Kernel order inside `apply_policy` is fixed:
(context crop) -> resize -> flips -> rotation -> jitter -> (HED) -> normalize.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Literal, Optional, Sequence, Union

import numpy as np

from src.mitoclass.errors import (
    BadMagic,
    CropTooLarge,
    NonPositiveFactor,
    ShapeMismatch,
    TruncatedFile,
    ZeroDimension,
    ZeroStd,
)
from src.mitoclass.rng import stream

if TYPE_CHECKING:
    from src.mitoclass.config import AugPolicy, InputMode
    from src.mitoclass.dataset import PatchRecord

PixelTensor = np.ndarray

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
OD_FLOOR = 1e-6
DUMP_MAGIC = b"MPXT"

_SNAP_TOLERANCE = 1e-9


@dataclass(frozen=True)
class StainMatrix:
    rows: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_vectors(cls, vectors: Sequence[Sequence[float]]) -> "StainMatrix":
        rows = np.asarray(vectors, dtype=np.float64)
        rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
        return cls(rows=rows, inverse=np.linalg.inv(rows))


# Hematoxylin, eosin, DAB optical-density vectors (Ruifrok-Johnston).
STAIN_MATRIX = StainMatrix.from_vectors(
    [
        [0.65, 0.70, 0.29],
        [0.07, 0.99, 0.11],
        [0.27, 0.57, 0.78],
    ]
)


def to_tensor(pixels: np.ndarray) -> PixelTensor:
    return pixels.astype(np.float64) / 255.0


def _as_hwc(img: PixelTensor) -> tuple[PixelTensor, bool]:
    if img.ndim == 2:
        return img[:, :, None], True
    if img.ndim != 3:
        raise ShapeMismatch(f"expected an H x W x C image, got shape {img.shape}")
    return img, False


def _require_rgb(img: PixelTensor, op: str) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatch(f"{op} needs a 3-channel image, got shape {img.shape}")


def _source_coords(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    coords = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    coords = np.clip(coords, 0.0, n_in - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, coords - lo


def resize_bilinear(img: PixelTensor, out_h: int, out_w: int) -> PixelTensor:
    """Bilinear resize with half-pixel centers; edge samples are clamped."""
    if out_h < 1 or out_w < 1 or img.size == 0:
        raise ZeroDimension(f"cannot resize {img.shape} to {out_h}x{out_w}")
    data, squeeze = _as_hwc(img)
    in_h, in_w = data.shape[:2]

    y0, y1, wy = _source_coords(out_h, in_h)
    x0, x1, wx = _source_coords(out_w, in_w)

    top = data[y0]
    rows = top + wy[:, None, None] * (data[y1] - top)
    left = rows[:, x0]
    out = left + wx[None, :, None] * (rows[:, x1] - left)
    return out[:, :, 0] if squeeze else out


def flip(img: PixelTensor, axis: Literal["horizontal", "vertical"]) -> PixelTensor:
    if axis == "horizontal":
        return np.flip(img, axis=1).copy()
    if axis == "vertical":
        return np.flip(img, axis=0).copy()
    raise ValueError(f"unknown flip axis '{axis}'")


def _snap(coords: np.ndarray) -> np.ndarray:
    nearest = np.round(coords)
    return np.where(np.abs(coords - nearest) < _SNAP_TOLERANCE, nearest, coords)


def rotate(img: PixelTensor, angle_deg: float) -> PixelTensor:
    """Counter-clockwise rotation about the image center; outside samples read 0."""
    data, squeeze = _as_hwc(img)
    h, w = data.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)

    ii, jj = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = ii - cy, jj - cx
    sx = _snap(cx + cos_t * dx - sin_t * dy)
    sy = _snap(cy + sin_t * dx + cos_t * dy)

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]

    def sample(yi: np.ndarray, xi: np.ndarray) -> np.ndarray:
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        values = data[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(inside[..., None], values, 0.0)

    top = (1.0 - fx) * sample(y0, x0) + fx * sample(y0, x0 + 1)
    bottom = (1.0 - fx) * sample(y0 + 1, x0) + fx * sample(y0 + 1, x0 + 1)
    out = (1.0 - fy) * top + fy * bottom
    return out[:, :, 0] if squeeze else out


def luma(img: PixelTensor) -> np.ndarray:
    return img @ LUMA_WEIGHTS


def color_jitter(
    img: PixelTensor,
    f_brightness: float,
    f_contrast: float,
    f_saturation: float,
) -> PixelTensor:
    _require_rgb(img, "color_jitter")
    for name, factor in (
        ("brightness", f_brightness),
        ("contrast", f_contrast),
        ("saturation", f_saturation),
    ):
        if factor < 0 or not math.isfinite(factor):
            raise NonPositiveFactor(f"{name} factor must be a finite value >= 0, got {factor}")

    out = np.clip(img * f_brightness, 0.0, 1.0)
    mean_gray = float(luma(out).mean())
    out = np.clip(mean_gray + f_contrast * (out - mean_gray), 0.0, 1.0)
    gray = luma(out)[..., None]
    return np.clip(gray + f_saturation * (out - gray), 0.0, 1.0)


def normalize(
    img: PixelTensor,
    mean: Sequence[float],
    std: Sequence[float],
) -> PixelTensor:
    mean_arr = np.asarray(mean, dtype=np.float64)
    std_arr = np.asarray(std, dtype=np.float64)
    if np.any(std_arr <= 0):
        raise ZeroStd(f"std components must be > 0, got {list(std_arr)}")
    if img.ndim != 3 or img.shape[2] != mean_arr.shape[0]:
        raise ShapeMismatch(f"cannot normalize {img.shape} with {mean_arr.shape[0]} channel stats")
    return (img - mean_arr) / std_arr


def rgb_to_hed(img: PixelTensor, clamp: bool = True) -> PixelTensor:
    _require_rgb(img, "rgb_to_hed")
    od = -np.log10(np.maximum(img, OD_FLOOR))
    hed = od @ STAIN_MATRIX.inverse
    return np.maximum(hed, 0.0) if clamp else hed


def hed_to_rgb(hed: PixelTensor) -> PixelTensor:
    _require_rgb(hed, "hed_to_rgb")
    return np.power(10.0, -(hed @ STAIN_MATRIX.rows))


def context_crop(img: PixelTensor, size: int) -> PixelTensor:
    h, w = img.shape[:2]
    if size < 1 or size > min(h, w):
        raise CropTooLarge(f"crop size {size} does not fit a {h}x{w} image")
    top = (h - size) // 2
    left = (w - size) // 2
    return img[top : top + size, left : left + size].copy()


@dataclass(frozen=True)
class HedStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    @classmethod
    def identity(cls) -> "HedStats":
        return cls(mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))

    def to_dict(self) -> dict[str, list[float]]:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, data: dict[str, Sequence[float]]) -> "HedStats":
        return cls(mean=tuple(data["mean"]), std=tuple(data["std"]))  # type: ignore[arg-type]


def hed_stats(
    patches: Iterable["PatchRecord"],
    input_mode: "InputMode",
    crop_size: int = 80,
) -> HedStats:
    """Per-channel HED mean/std over un-augmented patches."""
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for patch in patches:
        img = to_tensor(patch.pixels)
        if input_mode == "crop_rgb_hed":
            img = context_crop(img, crop_size)
        hed = rgb_to_hed(img).reshape(-1, 3)
        total += hed.sum(axis=0)
        total_sq += (hed**2).sum(axis=0)
        count += hed.shape[0]
    if count == 0:
        return HedStats.identity()
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean**2, 0.0))
    std = np.where(std > 0, std, 1.0)
    return HedStats(
        mean=tuple(float(m) for m in mean),  # type: ignore[arg-type]
        std=tuple(float(s) for s in std),  # type: ignore[arg-type]
    )


def apply_policy(
    patch: "PatchRecord",
    policy: "AugPolicy",
    input_mode: "InputMode",
    stream_seed: int,
    hed: Optional[HedStats] = None,
) -> PixelTensor:
    img = to_tensor(patch.pixels)
    if input_mode == "crop_rgb_hed":
        img = context_crop(img, policy.crop_size)
    img = resize_bilinear(img, policy.resize_to, policy.resize_to)

    if policy.enabled:
        rng = stream(stream_seed)
        hflip = rng.random() < policy.p_hflip
        vflip = rng.random() < policy.p_vflip
        angle = rng.uniform(-policy.max_rotation_deg, policy.max_rotation_deg)
        f_b = rng.uniform(1.0 - policy.brightness_delta, 1.0 + policy.brightness_delta)
        f_c = rng.uniform(1.0 - policy.contrast_delta, 1.0 + policy.contrast_delta)
        f_s = rng.uniform(
            max(0.0, 1.0 - policy.saturation_delta), 1.0 + policy.saturation_delta
        )
        if hflip:
            img = flip(img, "horizontal")
        if vflip:
            img = flip(img, "vertical")
        img = rotate(img, angle)
        img = color_jitter(img, f_b, f_c, f_s)

    rgb = normalize(img, policy.normalize_mean, policy.normalize_std)
    if input_mode == "rgb":
        return rgb
    stats = hed or HedStats.identity()
    stain = normalize(rgb_to_hed(img), stats.mean, stats.std)
    return np.concatenate([rgb, stain], axis=2)


def write_dump(path: Union[Path, str], tensor: PixelTensor) -> Path:
    data, _ = _as_hwc(tensor)
    h, w, c = data.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(DUMP_MAGIC + struct.pack("<III", h, w, c))
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    return path


def read_dump(path: Union[Path, str]) -> PixelTensor:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise TruncatedFile(f"{path}: header needs 16 bytes, file has {len(raw)}")
    if raw[:4] != DUMP_MAGIC:
        raise BadMagic(f"{path}: expected magic {DUMP_MAGIC!r}, found {raw[:4]!r}")
    h, w, c = struct.unpack("<III", raw[4:16])
    expected = h * w * c * 4
    if len(raw) - 16 != expected:
        raise TruncatedFile(f"{path}: payload is {len(raw) - 16} bytes, expected {expected}")
    return np.frombuffer(raw[16:], dtype="<f4").reshape(h, w, c).astype(np.float32)
