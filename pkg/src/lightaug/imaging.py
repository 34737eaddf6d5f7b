"""Resolution bookkeeping and lane rasterization.

Images are numpy arrays shaped ``(H, W)`` or ``(H, W, C)``.  Padding is
applied on the bottom and right edges only so annotation coordinates stay
valid on the padded canvas.

Pixel ``(row, col)`` has its center at ``x = col, y = row``; this is the
frame of CULane-style ``.lines.txt`` annotations.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ContractError(ValueError):
    """Raised when an input violates an operation's preconditions."""


@dataclass
class ScaleTrace:
    original_height: int
    original_width: int
    pad_bottom: int
    pad_right: int
    per_stage_dims: list[tuple[int, int]] = field(default_factory=list)

    @property
    def padded_shape(self) -> tuple[int, int]:
        return (self.original_height + self.pad_bottom,
                self.original_width + self.pad_right)


def padded_size(n: int, multiple: int) -> int:
    """Smallest value ``>= n`` divisible by ``multiple``."""
    return -(-n // multiple) * multiple


def pad_to_multiple(img: np.ndarray, multiple: int = 4) -> tuple[np.ndarray, ScaleTrace]:
    """Reflection-pad ``img`` on the bottom/right up to a multiple of ``multiple``."""
    if multiple < 1:
        raise ContractError(f"multiple must be >= 1, got {multiple}")
    img = np.asarray(img)
    if img.ndim not in (2, 3):
        raise ContractError(f"expected HxW or HxWxC image, got shape {img.shape}")
    h, w = img.shape[:2]
    if h < 1 or w < 1:
        raise ContractError(f"image must be at least 1x1, got {h}x{w}")
    pb = padded_size(h, multiple) - h
    pr = padded_size(w, multiple) - w
    trace = ScaleTrace(h, w, pb, pr)
    if pb == 0 and pr == 0:
        return img.copy(), trace
    widths = [(0, pb), (0, pr)] + [(0, 0)] * (img.ndim - 2)
    # numpy's reflect degenerates to edge replication for length-1 axes
    return np.pad(img, widths, mode="reflect"), trace


def crop_to_trace(img: np.ndarray, trace: ScaleTrace) -> np.ndarray:
    """Undo :func:`pad_to_multiple`."""
    img = np.asarray(img)
    if tuple(img.shape[:2]) != trace.padded_shape:
        raise ContractError(
            f"image is {img.shape[0]}x{img.shape[1]} but trace expects "
            f"{trace.padded_shape[0]}x{trace.padded_shape[1]}"
        )
    return img[: trace.original_height, : trace.original_width].copy()


def reflect_positions(q: np.ndarray, n: int) -> np.ndarray:
    """Map (possibly negative or out-of-range) positions onto ``[0, n)`` by
    mirror reflection about the first and last element."""
    q = np.asarray(q, dtype=np.int64)
    if n == 1:
        return np.zeros_like(q)
    period = 2 * (n - 1)
    m = q % period
    return np.where(m < n, m, period - m)


def reflect_index(n: int, total: int) -> np.ndarray:
    """Source indices for reflecting an axis of length ``n`` out to ``total``.

    Same sequence as ``np.pad(..., mode="reflect")`` on the trailing edge;
    used to pad torch feature maps by amounts larger than the axis.
    """
    return reflect_positions(np.arange(total), n)


def segment_within(xs: np.ndarray, ys: np.ndarray, a: Sequence[float], b: Sequence[float],
                   r2: float) -> np.ndarray:
    """``dist((xs, ys), segment ab)**2 < r2`` without dividing.

    Interior points compare ``cross**2 < r2 * |ab|**2``, so for coordinates on
    a coarse binary grid every product is exact and ties resolve the same way
    regardless of how the segment is oriented.
    """
    ax, ay = float(a[0]), float(a[1])
    dx, dy = float(b[0]) - ax, float(b[1]) - ay
    px, py = xs - ax, ys - ay
    dd = dx * dx + dy * dy
    dot = px * dx + py * dy
    near_a = px * px + py * py < r2
    if dd == 0.0:
        return near_a
    qx, qy = px - dx, py - dy
    near_b = qx * qx + qy * qy < r2
    cross = px * dy - py * dx
    near_mid = cross * cross < r2 * dd
    return np.where(dot <= 0, near_a, np.where(dot >= dd, near_b, near_mid))


def rasterize_lane(points, width: float, canvas_h: int, canvas_w: int) -> np.ndarray:
    """Binary mask of a stroked polyline.

    A pixel is set iff its center is strictly closer than ``width / 2`` to
    some segment.  Fewer than two points gives an empty mask.
    """
    if width < 1:
        raise ContractError(f"width must be >= 1, got {width}")
    if canvas_h < 1 or canvas_w < 1:
        raise ContractError(f"canvas must be at least 1x1, got {canvas_h}x{canvas_w}")
    mask = np.zeros((canvas_h, canvas_w), dtype=bool)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        return mask
    r = width / 2.0
    r2 = r * r
    for a, b in zip(pts[:-1], pts[1:]):
        if (b[1], b[0]) < (a[1], a[0]):
            a, b = b, a  # orientation-free, so reversed polylines give equal masks
        x0 = max(int(np.floor(min(a[0], b[0]) - r)), 0)
        x1 = min(int(np.ceil(max(a[0], b[0]) + r)), canvas_w - 1)
        y0 = max(int(np.floor(min(a[1], b[1]) - r)), 0)
        y1 = min(int(np.ceil(max(a[1], b[1]) + r)), canvas_h - 1)
        if x0 > x1 or y0 > y1:
            continue
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(np.float64)
        mask[y0:y1 + 1, x0:x1 + 1] |= segment_within(xs, ys, a, b, r2)
    return mask


def to_unit_range(img_u8: np.ndarray) -> np.ndarray:
    """uint8 image to float32 in [-1, 1]."""
    return img_u8.astype(np.float32) / 127.5 - 1.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[-1, 1] float image to uint8, rounding to nearest."""
    return np.clip(np.rint((np.asarray(img) + 1.0) * 127.5), 0, 255).astype(np.uint8)
