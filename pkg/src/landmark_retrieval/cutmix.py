"""Corner-Cutmix: paste a resized image over one corner of another.

Images are ``(H, W, C)`` float arrays with ``C`` in {1, 3} and values in
[0, 1].  The mixed sample always carries both labels at weight 0.5.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .exceptions import DimMismatchError, FormatError, InvalidFractionError

MIX_WEIGHT = 0.5


class Corner(enum.IntEnum):
    TOP_LEFT = 0
    TOP_RIGHT = 1
    BOTTOM_LEFT = 2
    BOTTOM_RIGHT = 3


def check_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] not in (1, 3):
        raise DimMismatchError(f"image must be (H, W, 1|3), got {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise FormatError("image pixels must lie in [0, 1]")
    return arr


def _source_coords(n_out: int, n_in: int):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize; output clamped to [0, 1]."""
    img = check_image(img)
    if out_h < 1 or out_w < 1:
        raise DimMismatchError(f"output size must be positive, got {out_h}x{out_w}")
    y0, y1, wy = _source_coords(out_h, img.shape[0])
    x0, x1, wx = _source_coords(out_w, img.shape[1])
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return np.clip(top * (1 - wy) + bottom * wy, 0.0, 1.0)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def patch_shape(height: int, width: int, fraction: float) -> Tuple[int, int]:
    return max(1, _round_half_up(fraction * height)), max(1, _round_half_up(fraction * width))


def patch_slices(height: int, width: int, corner: Corner, fraction: float) -> Tuple[slice, slice]:
    """Row/column slices of the pasted rectangle, flush with ``corner``."""
    ph, pw = patch_shape(height, width, fraction)
    corner = Corner(corner)
    rows = slice(0, ph) if corner in (Corner.TOP_LEFT, Corner.TOP_RIGHT) else slice(height - ph, height)
    cols = slice(0, pw) if corner in (Corner.TOP_LEFT, Corner.BOTTOM_LEFT) else slice(width - pw, width)
    return rows, cols


def corner_cutmix(img_a, img_b, corner: Corner, fraction: float) -> np.ndarray:
    """Overlay a resized ``img_a`` on ``corner`` of a copy of ``img_b``."""
    if not 0.0 < fraction <= 1.0:
        raise InvalidFractionError(f"fraction must be in (0, 1], got {fraction}")
    a = check_image(img_a)
    b = check_image(img_b)
    if a.shape[2] != b.shape[2]:
        raise DimMismatchError(f"channel counts differ: {a.shape[2]} vs {b.shape[2]}")
    rows, cols = patch_slices(b.shape[0], b.shape[1], corner, fraction)
    out = b.copy()
    out[rows, cols] = resize_bilinear(a, rows.stop - rows.start, cols.stop - cols.start)
    return out


@dataclass(frozen=True)
class MixedSample:
    base: np.ndarray
    mixed: np.ndarray
    label_a: int
    label_b: int
    corner: Corner
    fraction: float
    weight: float = MIX_WEIGHT

    def __post_init__(self):
        if self.base.shape != self.mixed.shape:
            raise DimMismatchError("base and mixed images must share geometry")
        if self.weight != MIX_WEIGHT:
            raise ValueError("mix weight is fixed at 0.5")


def draw_corner_fraction(rng: np.random.Generator, fraction_range=(0.3, 0.7)) -> Tuple[Corner, float]:
    lo, hi = fraction_range
    if not 0.0 < lo <= hi <= 1.0:
        raise InvalidFractionError(f"fraction range must satisfy 0 < lo <= hi <= 1, got {fraction_range}")
    corner = Corner(int(rng.integers(4)))
    fraction = float(rng.uniform(lo, hi))
    return corner, fraction


def make_mixed_sample(a, b, fraction_range=(0.3, 0.7), rng_seed=0) -> MixedSample:
    """Build the dual-stream sample for ``a = (image, label)``, ``b = (image, label)``.

    The pasted image is ``a``; ``b`` is the background.  Corner and
    fraction are drawn from ``rng_seed`` alone.
    """
    (img_a, label_a), (img_b, label_b) = a, b
    rng = np.random.default_rng(rng_seed)
    corner, fraction = draw_corner_fraction(rng, fraction_range)
    base = check_image(img_a)
    mixed = corner_cutmix(base, img_b, corner, fraction)
    if base.shape != mixed.shape:
        # base stream is fed at the background geometry
        base = resize_bilinear(base, mixed.shape[0], mixed.shape[1])
    return MixedSample(base, mixed, int(label_a), int(label_b), corner, fraction)
