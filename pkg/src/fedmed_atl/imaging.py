"""2D slice representation and affine resampling primitives.

Axis convention, used everywhere in the package: ``x`` is the column index
growing to the right, ``y`` is the row index growing downward, and positive
rotation angles turn the content counterclockwise as the image is displayed
(the same sense as :func:`numpy.rot90`). Rotation and rescaling act about the
pixel-grid center ``((W - 1) / 2, (H - 1) / 2)``.

All transforms are inverse-mapped: every output pixel looks up a source
coordinate. Source coordinates that fall outside the image take the fill
value, which defaults to the minimum of the image's value range (black
background).

The array-level functions (``*_array``) accept any ``(..., H, W)`` stack and
are what the augmentation module uses on whole batches; the ``Slice2D``
functions wrap them with validation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TRAIN_RANGE = (-1.0, 1.0)
METRIC_RANGE = (0.0, 1.0)
MIN_SIZE = 8

# Source coordinates this close to the border still count as inside the
# support for bilinear sampling.
_EDGE_TOL = 1e-9


def normalize_angle(degrees: float) -> float:
    """Map an angle to [-180, 180]; 180 stays 180."""
    d = math.fmod(degrees, 360.0)
    if d > 180.0:
        d -= 360.0
    elif d < -180.0:
        d += 360.0
    return d + 0.0  # drop negative zero


@dataclass(frozen=True, eq=False)
class Slice2D:
    """A single-channel 2D image with a declared intensity range."""

    pixels: np.ndarray
    value_range: tuple[float, float] = TRAIN_RANGE

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError(f"Slice2D needs a 2D array, got shape {px.shape}")
        if min(px.shape) < MIN_SIZE:
            raise ValueError(f"Slice2D sides must be >= {MIN_SIZE}, got {px.shape}")
        lo, hi = (float(v) for v in self.value_range)
        if not lo < hi:
            raise ValueError(f"degenerate value range {self.value_range}")
        if not np.all(np.isfinite(px)):
            raise ValueError("Slice2D pixels must be finite")
        if px.min() < lo or px.max() > hi:
            raise ValueError(
                f"pixels [{px.min()}, {px.max()}] fall outside value range [{lo}, {hi}]"
            )
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "value_range", (lo, hi))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def with_pixels(self, pixels: np.ndarray) -> Slice2D:
        return Slice2D(pixels, self.value_range)

    def __eq__(self, other):
        if not isinstance(other, Slice2D):
            return NotImplemented
        return self.value_range == other.value_range and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


@dataclass(frozen=True)
class AffineParams:
    """Rotation (degrees, counterclockwise), translation (pixels), scale ratio."""

    rotation_deg: float = 0.0
    translate_x: float = 0.0
    translate_y: float = 0.0
    scale_ratio: float = 1.0

    def __post_init__(self):
        vals = (self.rotation_deg, self.translate_x, self.translate_y, self.scale_ratio)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite affine parameters {vals}")
        if self.scale_ratio <= 0:
            raise ValueError(f"scale_ratio must be > 0, got {self.scale_ratio}")
        object.__setattr__(self, "rotation_deg", normalize_angle(float(self.rotation_deg)))
        for name in ("translate_x", "translate_y", "scale_ratio"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def is_identity(self) -> bool:
        return (
            self.rotation_deg == 0.0
            and self.translate_x == 0.0
            and self.translate_y == 0.0
            and self.scale_ratio == 1.0
        )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.rotation_deg, self.translate_x, self.translate_y, self.scale_ratio)


IDENTITY = AffineParams()


@dataclass(frozen=True)
class InterpSpec:
    """Resampling method and the value used for out-of-support pixels.

    ``fill_value=None`` means "minimum of the image's value range".
    """

    method: str = "bilinear"
    fill_value: float | None = field(default=None)

    def __post_init__(self):
        if self.method not in ("nearest", "bilinear"):
            raise ValueError(f"unknown interpolation method {self.method!r}")


NEAREST = InterpSpec("nearest")
BILINEAR = InterpSpec("bilinear")


def _cos_sin(degrees: float) -> tuple[float, float]:
    # exact values for quarter turns so nearest-neighbour rotation is a permutation
    quarter = degrees / 90.0
    if quarter == round(quarter):
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(round(quarter)) % 4]
    rad = math.radians(degrees)
    return math.cos(rad), math.sin(rad)


def _sample(arr: np.ndarray, src_x: np.ndarray, src_y: np.ndarray, method: str, fill: float) -> np.ndarray:
    h, w = arr.shape[-2:]
    if method == "nearest":
        ix = np.floor(src_x + 0.5).astype(np.int64)
        iy = np.floor(src_y + 0.5).astype(np.int64)
        inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        vals = arr[..., np.clip(iy, 0, h - 1), np.clip(ix, 0, w - 1)]
        return np.where(inside, vals, fill)

    inside = (
        (src_x >= -_EDGE_TOL) & (src_x <= w - 1 + _EDGE_TOL)
        & (src_y >= -_EDGE_TOL) & (src_y <= h - 1 + _EDGE_TOL)
    )
    cx = np.clip(src_x, 0, w - 1)
    cy = np.clip(src_y, 0, h - 1)
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = cx - x0
    wy = cy - y0
    top = arr[..., y0, x0] * (1 - wx) + arr[..., y0, x1] * wx
    bottom = arr[..., y1, x0] * (1 - wx) + arr[..., y1, x1] * wx
    return np.where(inside, top * (1 - wy) + bottom * wy, fill)


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray, float, float]:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs, ys, (w - 1) / 2.0, (h - 1) / 2.0


def rotate_array(arr: np.ndarray, degrees: float, method: str = "bilinear", fill: float = 0.0) -> np.ndarray:
    """Rotate the last two axes of ``arr`` counterclockwise about the center."""
    if not math.isfinite(degrees):
        raise ValueError(f"rotation angle must be finite, got {degrees}")
    arr = np.asarray(arr, dtype=np.float64)
    d = normalize_angle(degrees)
    if d == 0.0:
        return arr.copy()
    c, s = _cos_sin(d)
    xs, ys, cx, cy = _grid(*arr.shape[-2:])
    u, v = xs - cx, ys - cy
    return _sample(arr, cx + u * c - v * s, cy + u * s + v * c, method, fill)


def translate_array(arr: np.ndarray, dx: float, dy: float, method: str = "bilinear", fill: float = 0.0) -> np.ndarray:
    """Shift content right by ``dx`` and down by ``dy`` pixels."""
    if not (math.isfinite(dx) and math.isfinite(dy)):
        raise ValueError(f"translation must be finite, got ({dx}, {dy})")
    arr = np.asarray(arr, dtype=np.float64)
    if dx == 0 and dy == 0:
        return arr.copy()
    xs, ys, _, _ = _grid(*arr.shape[-2:])
    return _sample(arr, xs - dx, ys - dy, method, fill)


def rescale_array(arr: np.ndarray, ratio: float, method: str = "bilinear", fill: float = 0.0) -> np.ndarray:
    """Zoom content about the center by ``ratio`` keeping the canvas size.

    Ratios above 1 enlarge the content (the overflow is cropped away); ratios
    below 1 shrink it and pad the border with ``fill``.
    """
    if not (math.isfinite(ratio) and ratio > 0):
        raise ValueError(f"scale ratio must be a finite positive number, got {ratio}")
    arr = np.asarray(arr, dtype=np.float64)
    if ratio == 1.0:
        return arr.copy()
    xs, ys, cx, cy = _grid(*arr.shape[-2:])
    return _sample(arr, cx + (xs - cx) / ratio, cy + (ys - cy) / ratio, method, fill)


def _fill(img: Slice2D, interp: InterpSpec) -> float:
    fill = img.value_range[0] if interp.fill_value is None else float(interp.fill_value)
    lo, hi = img.value_range
    if not lo <= fill <= hi:
        raise ValueError(f"fill value {fill} outside the image value range {img.value_range}")
    return fill


def rotate(img: Slice2D, degrees: float, interp: InterpSpec = BILINEAR) -> Slice2D:
    return img.with_pixels(rotate_array(img.pixels, degrees, interp.method, _fill(img, interp)))


def translate(img: Slice2D, dx: float, dy: float, interp: InterpSpec = BILINEAR) -> Slice2D:
    return img.with_pixels(translate_array(img.pixels, dx, dy, interp.method, _fill(img, interp)))


def rescale(img: Slice2D, ratio: float, interp: InterpSpec = BILINEAR) -> Slice2D:
    return img.with_pixels(rescale_array(img.pixels, ratio, interp.method, _fill(img, interp)))


def apply_affine_array(arr: np.ndarray, p: AffineParams, method: str = "bilinear", fill: float = 0.0) -> np.ndarray:
    out = rotate_array(arr, p.rotation_deg, method, fill)
    out = translate_array(out, p.translate_x, p.translate_y, method, fill)
    return rescale_array(out, p.scale_ratio, method, fill)


def apply_affine(img: Slice2D, p: AffineParams, interp: InterpSpec = BILINEAR) -> Slice2D:
    """Rotate, then translate, then rescale; the order is fixed."""
    return img.with_pixels(apply_affine_array(img.pixels, p, interp.method, _fill(img, interp)))


def center_crop_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    if out_h > h or out_w > w or out_h < 1 or out_w < 1:
        raise ValueError(f"cannot crop {h}x{w} to {out_h}x{out_w}")
    # odd leftovers go to the bottom/right, so the window leans top-left
    top = (h - out_h) // 2
    left = (w - out_w) // 2
    return np.array(arr[..., top:top + out_h, left:left + out_w], dtype=np.float64)


def center_crop(img: Slice2D, out_h: int, out_w: int) -> Slice2D:
    return img.with_pixels(center_crop_array(img.pixels, out_h, out_w))


def normalize_array(arr: np.ndarray, src_range, dst_range) -> np.ndarray:
    s_lo, s_hi = (float(v) for v in src_range)
    d_lo, d_hi = (float(v) for v in dst_range)
    if not s_hi > s_lo:
        raise ValueError(f"degenerate source range {src_range}")
    if (s_lo, s_hi) == (d_lo, d_hi):
        return np.clip(np.asarray(arr, dtype=np.float64), d_lo, d_hi)
    out = d_lo + (np.asarray(arr, dtype=np.float64) - s_lo) * ((d_hi - d_lo) / (s_hi - s_lo))
    return np.clip(out, min(d_lo, d_hi), max(d_lo, d_hi))


def normalize(img: Slice2D, src_range, dst_range) -> Slice2D:
    """Linearly remap intensities so ``src_range`` lands on ``dst_range``."""
    return Slice2D(normalize_array(img.pixels, src_range, dst_range), tuple(dst_range))
