"""Turn detector probability maps into lane polylines."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datasets import format_lines


@dataclass
class DecodedLanes:
    # (slot index 0..L-1, Nx2 array of (x, y) with increasing y)
    lanes: list[tuple[int, np.ndarray]] = field(default_factory=list)
    confidences: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def polylines(self) -> list[np.ndarray]:
        return [pts for _, pts in self.lanes]


def decode_lanes(prob_maps, existence, exist_thresh: float = 0.5, row_stride: int = 20,
                 row_prob_floor: float = 0.3) -> DecodedLanes:
    """Row-sampled argmax decoding.

    ``prob_maps`` is (L+1)xHxW with channel 0 the background; ``existence``
    has L confidences.  Only lanes with confidence strictly above
    ``exist_thresh`` are searched.  Rows are sampled from the bottom row
    upward every ``row_stride`` pixels; a row contributes the column of the
    lane map's maximum (leftmost on ties) if that maximum is at least
    ``row_prob_floor``.  Lanes with fewer than two points are dropped.
    """
    prob_maps = np.asarray(prob_maps)
    existence = np.asarray(existence, dtype=np.float64).reshape(-1)
    n_lanes = prob_maps.shape[0] - 1
    h = prob_maps.shape[1]
    rows = np.arange(h - 1, -1, -row_stride)
    out = DecodedLanes(confidences=existence.copy())
    for k in range(n_lanes):
        if not existence[k] > exist_thresh:
            continue
        sampled = prob_maps[k + 1, rows]
        cols = sampled.argmax(axis=1)
        peak = sampled[np.arange(len(rows)), cols]
        keep = peak >= row_prob_floor
        if keep.sum() < 2:
            continue
        pts = np.stack([cols[keep], rows[keep]], 1).astype(np.float64)[::-1]
        out.lanes.append((k, np.ascontiguousarray(pts)))
    return out


def lanes_to_culane_lines(dec: DecodedLanes) -> str:
    """One ``x y x y ...`` line per lane, rows in increasing-y order."""
    return format_lines([pts[np.argsort(pts[:, 1], kind="stable")] for _, pts in dec.lanes])
