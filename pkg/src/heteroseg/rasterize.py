"""Landmark-contour rasterization.

Pixel-space convention: pixel (row r, col c) covers [c, c+1) × [r, r+1) and
has its center at (c+0.5, r+0.5). A pixel belongs to a polygon iff its center
is inside under the even-odd rule, with ties resolved top/left inclusive:
a center exactly on a left edge is in, on a right edge is out; horizontal
edge crossings use the half-open [y_lo, y_hi) span.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anatomy import ContourTopology, LandmarkSet, Structure


@dataclass(frozen=True)
class StructureMasks:
    """Independent per-structure binary maps; overlaps are allowed."""

    masks: dict

    def __getitem__(self, structure: Structure) -> np.ndarray:
        return self.masks[structure]

    def __contains__(self, structure: Structure) -> bool:
        return structure in self.masks

    @property
    def structures(self) -> tuple:
        return tuple(self.masks)


def fill_polygon(vertices: np.ndarray, height: int, width: int) -> np.ndarray:
    """Even-odd scanline fill of one closed polygon given in pixel coordinates.

    Vertices are clipped to the frame first; a zero-area polygon yields an
    empty mask without error.
    """
    verts = np.asarray(vertices, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[1] != 2 or len(verts) < 3:
        raise ValueError(f"polygon needs ≥3 (x, y) vertices, got shape {verts.shape}")
    xs = np.clip(verts[:, 0], 0.0, float(width))
    ys = np.clip(verts[:, 1], 0.0, float(height))
    x1, y1 = xs, ys
    x2, y2 = np.roll(xs, -1), np.roll(ys, -1)

    out = np.zeros((height, width), dtype=bool)
    r_lo = max(0, int(np.floor(ys.min() - 0.5)))
    r_hi = min(height - 1, int(np.ceil(ys.max())))
    for r in range(r_lo, r_hi + 1):
        py = r + 0.5
        crossing = ((y1 <= py) & (py < y2)) | ((y2 <= py) & (py < y1))
        if not crossing.any():
            continue
        t = (py - y1[crossing]) / (y2[crossing] - y1[crossing])
        xcross = np.sort(x1[crossing] + t * (x2[crossing] - x1[crossing]))
        for lo, hi in zip(xcross[0::2], xcross[1::2]):
            # pixels whose center satisfies lo <= c+0.5 < hi
            c0 = max(0, int(np.ceil(lo - 0.5)))
            c1 = min(width, int(np.ceil(hi - 0.5)))
            if c1 > c0:
                out[r, c0:c1] = True
    return out


def fill_contours(landmarks: LandmarkSet, topology: ContourTopology, height: int, width: int) -> StructureMasks:
    """Rasterize every structure's closed polylines into independent binary maps.

    Coordinates are denormalized to pixel space and clipped to the frame; a
    structure with several polylines gets the union of their fills.
    """
    if topology.layout.total_nodes != landmarks.layout.total_nodes:
        raise ValueError("landmarks and topology use different layouts")
    coords = landmarks.denormalized(width, height)
    masks = {}
    for structure, polys in topology.polylines:
        mask = np.zeros((height, width), dtype=bool)
        for poly in polys:
            mask |= fill_polygon(coords[list(poly)], height, width)
        masks[structure] = mask
    return StructureMasks(masks=masks)
