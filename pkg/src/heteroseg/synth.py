"""Synthetic multi-center generator: torso-like scenes with exact ground truth.

Every sample contains two lung-analog ellipses, one heart-analog ellipse
overlapping the image-left lung, and two clavicle-analog bars overlapping the
lung tops. Landmarks are placed analytically on each shape boundary, masks are
computed analytically at pixel centers, and per-center intensity shifts
(brightness offset, contrast scale, noise level) provide the domain signature.
Availability only gates training; ground truth is always generated in full.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .anatomy import (
    ContourTopology,
    LabelAvailability,
    LandmarkSet,
    Structure,
    StructureLayout,
    default_layout,
    default_topology,
)
from .data import CenterDataset, make_record
from .errors import DataError
from .rasterize import fill_contours

_SUPERSAMPLE = 4  # rendering resolution multiplier for soft shape edges

# paint levels before the per-center intensity shift
_BACKGROUND = 0.20
_LEVELS = {Structure.LUNGS: 0.50, Structure.HEART: 0.70, Structure.CLAVICLES: 0.64}


@dataclass(frozen=True)
class ShapeRanges:
    """Uniform sampling ranges for shape parameters, in normalized units."""

    lung_rx: tuple = (0.10, 0.13)
    lung_ry: tuple = (0.16, 0.20)
    lung_cx_offset: tuple = (0.19, 0.23)
    lung_cy: tuple = (0.44, 0.50)
    heart_rx: tuple = (0.11, 0.14)
    heart_ry: tuple = (0.09, 0.12)
    heart_dx: tuple = (0.05, 0.09)
    heart_dy: tuple = (0.14, 0.18)
    clav_half_len: tuple = (0.090, 0.110)
    clav_half_th: tuple = (0.034, 0.048)
    clav_tilt: tuple = (-0.18, 0.18)
    size_scale: tuple = (0.92, 1.08)

    def __post_init__(self):
        for name in dataclasses.asdict(self):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise ValueError(f"shape range {name}={lo, hi} is not an ordered finite pair")


@dataclass(frozen=True)
class SyntheticCenterSpec:
    center_id: str
    n_samples: int
    availability: LabelAvailability
    brightness: float = 0.0
    contrast: float = 1.0
    noise_sigma: float = 0.02
    seed: int = 0
    shapes: ShapeRanges = ShapeRanges()

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError(f"center {self.center_id}: n_samples must be ≥ 1")
        if self.contrast <= 0:
            raise ValueError(f"center {self.center_id}: contrast must be positive")
        if self.noise_sigma < 0:
            raise ValueError(f"center {self.center_id}: noise_sigma must be ≥ 0")


@dataclass(frozen=True)
class _Ellipse:
    cx: float
    cy: float
    rx: float
    ry: float

    def boundary(self, n: int) -> np.ndarray:
        theta = 2.0 * math.pi * np.arange(n) / n - math.pi / 2.0
        return np.stack(
            [self.cx + self.rx * np.cos(theta), self.cy + self.ry * np.sin(theta)], axis=1
        )

    def inside(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        return ((xs - self.cx) / self.rx) ** 2 + ((ys - self.cy) / self.ry) ** 2 <= 1.0


@dataclass(frozen=True)
class _Bar:
    cx: float
    cy: float
    half_len: float
    half_th: float
    tilt: float

    def boundary(self) -> np.ndarray:
        hl, ht = self.half_len, self.half_th
        local = np.array(
            [(-hl, -ht), (0, -ht), (hl, -ht), (hl, 0), (hl, ht), (0, ht), (-hl, ht), (-hl, 0)],
            dtype=np.float64,
        )
        c, s = math.cos(self.tilt), math.sin(self.tilt)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    def inside(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.tilt), math.sin(self.tilt)
        u = (xs - self.cx) * c + (ys - self.cy) * s
        v = -(xs - self.cx) * s + (ys - self.cy) * c
        return (np.abs(u) <= self.half_len) & (np.abs(v) <= self.half_th)


def _uniform(rng, pair) -> float:
    return float(rng.uniform(pair[0], pair[1]))


def _sample_scene(rng, shapes: ShapeRanges):
    """Draw one scene. The draw order below is part of the determinism contract."""
    scale = _uniform(rng, shapes.size_scale)
    lungs = []
    for side in (-1.0, +1.0):
        cx = 0.5 + side * _uniform(rng, shapes.lung_cx_offset)
        cy = _uniform(rng, shapes.lung_cy)
        rx = _uniform(rng, shapes.lung_rx) * scale
        ry = _uniform(rng, shapes.lung_ry) * scale
        lungs.append(_Ellipse(cx, cy, rx, ry))
    left = lungs[0]
    heart = _Ellipse(
        left.cx + _uniform(rng, shapes.heart_dx),
        left.cy + _uniform(rng, shapes.heart_dy),
        _uniform(rng, shapes.heart_rx) * scale,
        _uniform(rng, shapes.heart_ry) * scale,
    )
    clavicles = []
    for lung in lungs:
        clavicles.append(
            _Bar(
                cx=lung.cx,
                cy=lung.cy - lung.ry,  # bar centered on the lung top edge: overlap by construction
                half_len=_uniform(rng, shapes.clav_half_len) * scale,
                half_th=_uniform(rng, shapes.clav_half_th) * scale,
                tilt=_uniform(rng, shapes.clav_tilt),
            )
        )
    return lungs, heart, clavicles


def _pixel_center_grid(size: int, factor: int = 1):
    n = size * factor
    axis = (np.arange(n) + 0.5) / n
    xs, ys = np.meshgrid(axis, axis)  # ys varies along rows
    return xs, ys


def _scene_landmarks(layout: StructureLayout, lungs, heart, clavicles) -> np.ndarray:
    coords = np.zeros((layout.total_nodes, 2), dtype=np.float64)
    for structure in layout.structures:
        block = layout.block_slice(structure)
        count = block.stop - block.start
        if structure is Structure.LUNGS:
            half = count // 2
            coords[block.start : block.start + half] = lungs[0].boundary(half)
            coords[block.start + half : block.stop] = lungs[1].boundary(count - half)
        elif structure is Structure.HEART:
            coords[block] = heart.boundary(count)
        elif structure is Structure.CLAVICLES:
            half = count // 2
            if half != 8 or count != 16:
                raise DataError("clavicle-analog bars need exactly 8 nodes per side")
            coords[block.start : block.start + half] = clavicles[0].boundary()
            coords[block.start + half : block.stop] = clavicles[1].boundary()
    return coords


def _validate_layout(layout: StructureLayout) -> None:
    if Structure.LUNGS not in layout.structures:
        raise DataError("synthetic scenes need a LUNGS block")
    if layout.node_count(Structure.LUNGS) < 6 or layout.node_count(Structure.LUNGS) % 2:
        raise DataError("LUNGS block must have an even count ≥ 6 (two contours)")
    if Structure.HEART in layout.structures and layout.node_count(Structure.HEART) < 3:
        raise DataError("HEART block must have ≥ 3 nodes")
    if Structure.CLAVICLES in layout.structures and layout.node_count(Structure.CLAVICLES) != 16:
        raise DataError("CLAVICLES block must have 16 nodes (8 per bar)")


def generate_center(
    spec: SyntheticCenterSpec,
    layout: StructureLayout | None = None,
    image_size: int = 64,
) -> CenterDataset:
    """Generate one center; bitwise-deterministic in (spec, layout, image_size)."""
    layout = layout or default_layout()
    _validate_layout(layout)
    topology = default_topology(layout)
    rng = np.random.default_rng(spec.seed)
    xs4, ys4 = _pixel_center_grid(image_size, _SUPERSAMPLE)
    annotated = LabelAvailability.of(*layout.structures)

    records = []
    for i in range(spec.n_samples):
        lungs, heart, clavicles = _sample_scene(rng, spec.shapes)
        coords = _scene_landmarks(layout, lungs, heart, clavicles)
        landmarks = LandmarkSet(layout=layout, coords=coords)

        shapes_by_structure = {Structure.LUNGS: lungs}
        if Structure.HEART in layout.structures:
            shapes_by_structure[Structure.HEART] = [heart]
        if Structure.CLAVICLES in layout.structures:
            shapes_by_structure[Structure.CLAVICLES] = clavicles

        # the landmark polygons are the authoritative ground truth; the pixel
        # masks are their fills, so the two label views agree by construction
        masks = fill_contours(landmarks, topology, image_size, image_size)
        image = np.full((image_size, image_size), _BACKGROUND, dtype=np.float64)
        for structure in layout.structures:
            parts = shapes_by_structure[structure]
            for part in parts:
                cov = part.inside(xs4, ys4).astype(np.float64)
                cov = cov.reshape(
                    image_size, _SUPERSAMPLE, image_size, _SUPERSAMPLE
                ).mean(axis=(1, 3))
                image = image * (1.0 - cov) + _LEVELS[structure] * cov

        if Structure.CLAVICLES in masks and not np.any(
            masks[Structure.CLAVICLES] & masks[Structure.LUNGS]
        ):
            raise DataError(f"{spec.center_id} sample {i}: clavicle bars missed the lung tops")

        image = (image - 0.5) * spec.contrast + 0.5 + spec.brightness
        image = image + rng.normal(0.0, spec.noise_sigma, image.shape)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)

        records.append(
            make_record(
                sample_id=f"{spec.center_id}_{i:04d}",
                center_id=spec.center_id,
                image=image,
                gt_landmarks=landmarks,
                gt_masks=masks,
                availability=spec.availability,
                annotated=annotated,
            )
        )
    return CenterDataset(
        center_id=spec.center_id, records=tuple(records), availability=spec.availability
    )


def generate_synthetic_centers(
    specs,
    layout: StructureLayout | None = None,
    image_size: int = 64,
):
    """Generate all centers plus the shared contour topology."""
    layout = layout or default_layout()
    ids = [spec.center_id for spec in specs]
    if len(set(ids)) != len(ids):
        raise DataError(f"duplicate center ids in synthetic specs: {ids}")
    datasets = [generate_center(spec, layout, image_size) for spec in specs]
    return datasets, default_topology(layout)


def default_synthetic_specs(n_samples: int = 240) -> list:
    """Three-center desk scenario.

    Availability grows A ⊂ B ⊂ C; intensity statistics separate the centers
    (the domain signature a naive pixel model can memorize), and center C has
    systematically larger organs so bounding-box rescaling has something to
    remove.
    """
    return [
        SyntheticCenterSpec(
            center_id="SYNTH_A",
            n_samples=n_samples,
            availability=LabelAvailability.of(Structure.LUNGS),
            brightness=-0.10,
            contrast=0.95,
            noise_sigma=0.030,
            seed=11,
            shapes=ShapeRanges(size_scale=(0.88, 1.00)),
        ),
        SyntheticCenterSpec(
            center_id="SYNTH_B",
            n_samples=n_samples,
            availability=LabelAvailability.of(Structure.LUNGS, Structure.HEART),
            brightness=0.04,
            contrast=1.00,
            noise_sigma=0.018,
            seed=12,
            shapes=ShapeRanges(size_scale=(0.94, 1.06)),
        ),
        SyntheticCenterSpec(
            center_id="SYNTH_C",
            n_samples=n_samples,
            availability=LabelAvailability.full(),
            brightness=0.14,
            contrast=1.08,
            noise_sigma=0.010,
            seed=13,
            shapes=ShapeRanges(size_scale=(1.10, 1.24)),
        ),
    ]


def specs_from_json(path) -> tuple:
    """Parse a synthetic-center spec document: {"image_size": ..., "centers": [...]}."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"spec file missing: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"spec file {path} is not valid JSON: {exc}") from exc
    image_size = int(doc.get("image_size", 64))
    specs = []
    for entry in doc.get("centers", []):
        try:
            shapes = ShapeRanges(
                **{k: tuple(v) for k, v in entry.get("shapes", {}).items()}
            )
            specs.append(
                SyntheticCenterSpec(
                    center_id=entry["id"],
                    n_samples=int(entry["n_samples"]),
                    availability=LabelAvailability.of(*entry["availability"]),
                    brightness=float(entry.get("brightness", 0.0)),
                    contrast=float(entry.get("contrast", 1.0)),
                    noise_sigma=float(entry.get("noise_sigma", 0.02)),
                    seed=int(entry.get("seed", 0)),
                    shapes=shapes,
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad synthetic center entry {entry!r}: {exc}") from exc
    if not specs:
        raise DataError(f"spec file {path} declares no centers")
    return specs, image_size
