"""Geometric and intensity preprocessing for nodule crops."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

AIR_HU = -1000.0


@dataclass(frozen=True)
class Window:
    """Half-open pixel box ``[x0, x1) x [y0, y1)``; x is the column axis."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0


def square_side(bbox_h: int, bbox_w: int) -> int:
    """Side length so the larger box extent is 80% of it, rounded half up."""
    m = max(int(bbox_h), int(bbox_w))
    # round(m / 0.8) half-up, in exact integer arithmetic.
    return (5 * m + 2) // 4


def square_window(bbox: Window, height: int, width: int) -> Window:
    """Square window centred on ``bbox``, shifted to stay inside the image.

    If the side exceeds an image extent the window stays centred on that axis
    and :func:`crop_window` fills the outside with air.
    """
    if bbox.width <= 0 or bbox.height <= 0:
        raise ValueError(f"empty bounding box {bbox}")
    if bbox.x0 < 0 or bbox.y0 < 0 or bbox.x1 > width or bbox.y1 > height:
        raise ValueError(f"bounding box {bbox} outside image {height}x{width}")
    side = square_side(bbox.height, bbox.width)

    def place(lo: int, extent: int, limit: int) -> int:
        start = lo + (extent - side) // 2
        if side <= limit:
            start = min(max(start, 0), limit - side)
        return start

    x0 = place(bbox.x0, bbox.width, width)
    y0 = place(bbox.y0, bbox.height, height)
    return Window(x0, y0, x0 + side, y0 + side)


def crop_window(image: np.ndarray, window: Window, fill: float = AIR_HU) -> np.ndarray:
    """Crop ``image`` (..., H, W) to ``window``, filling out-of-image pixels."""
    image = np.asarray(image)
    H, W = image.shape[-2:]
    out = np.full(image.shape[:-2] + (window.height, window.width), fill, dtype=image.dtype)
    sy0, sy1 = max(window.y0, 0), min(window.y1, H)
    sx0, sx1 = max(window.x0, 0), min(window.x1, W)
    if sy0 < sy1 and sx0 < sx1:
        out[..., sy0 - window.y0 : sy1 - window.y0, sx0 - window.x0 : sx1 - window.x0] = image[
            ..., sy0:sy1, sx0:sx1
        ]
    return out


def _axis_weights(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def bilinear_resize(image: np.ndarray, out_shape=(64, 64)) -> np.ndarray:
    """Half-pixel-centre bilinear resampling with edge clamping.

    Works on ``(h, w)`` images or stacks ``(..., h, w)``; every slice gets the
    same lateral mapping.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[-2:]
    if h < 1 or w < 1:
        raise ValueError(f"cannot resize an empty image {img.shape}")
    oh, ow = out_shape
    y0, y1, wy = _axis_weights(h, oh)
    x0, x1, wx = _axis_weights(w, ow)
    top = img[..., y0, :] * (1 - wy)[:, None] + img[..., y1, :] * wy[:, None]
    return top[..., x0] * (1 - wx) + top[..., x1] * wx


def preprocess_crop(volume_hu: np.ndarray, bbox: Window, size: int = 64) -> np.ndarray:
    """Square-pad around ``bbox`` and resample every slice to ``size`` x ``size``."""
    vol = np.asarray(volume_hu, dtype=np.float64)
    if vol.ndim == 2:
        vol = vol[None]
    window = square_window(bbox, vol.shape[-2], vol.shape[-1])
    return bilinear_resize(crop_window(vol, window), (size, size)).astype(np.float32)


# --------------------------------------------------------------------------
# intensity statistics


class DegenerateStatsError(ValueError):
    pass


def _voxels(item) -> np.ndarray:
    # Accept NoduleSample, NoduleVolume or a bare array.
    if hasattr(item, "volume"):
        item = item.volume
    if hasattr(item, "slices"):
        item = item.slices
    return np.asarray(item, dtype=np.float64)


def compute_dataset_stats(volumes: Iterable) -> dict:
    """Voxel mean and population std over every training volume.

    Accumulated per volume with the pairwise (Chan et al.) merge, so the
    corpus never needs to fit in memory at once.
    """
    n = 0
    mean = 0.0
    m2 = 0.0
    for v in volumes:
        arr = _voxels(v)
        k = arr.size
        if k == 0:
            continue
        mu_b = float(arr.mean())
        m2_b = float(((arr - mu_b) ** 2).sum())
        delta = mu_b - mean
        tot = n + k
        mean += delta * k / tot
        m2 += m2_b + delta * delta * n * k / tot
        n = tot
    if n == 0:
        raise DegenerateStatsError("no voxels in the training set")
    return {"mean": mean, "std": float(np.sqrt(m2 / n))}


def normalize_intensity(volume: np.ndarray, stats: dict, dtype=np.float32) -> np.ndarray:
    std = float(stats["std"])
    if not std > 1e-6:
        raise DegenerateStatsError(f"intensity std {std} is degenerate (constant dataset?)")
    return ((np.asarray(volume, dtype=np.float64) - float(stats["mean"])) / std).astype(dtype)
