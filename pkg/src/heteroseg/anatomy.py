"""Ordered landmark layout, contour topology and availability masking.

Landmark nodes live in a single flat index space of size D, partitioned into
per-structure blocks in the fixed order lungs, heart, clavicles. Losses and
models never hold structure semantics themselves; they consume the boolean
node masks produced here.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np


class Structure(Enum):
    LUNGS = "LUNGS"
    HEART = "HEART"
    CLAVICLES = "CLAVICLES"

    def __repr__(self):
        return self.name


#: Canonical block order. Layouts may omit a suffix (e.g. lungs-only), never
#: an interior structure.
STRUCTURE_ORDER = (Structure.LUNGS, Structure.HEART, Structure.CLAVICLES)


def _as_structure(value) -> Structure:
    if isinstance(value, Structure):
        return value
    try:
        return Structure[str(value)]
    except KeyError:
        raise ValueError(f"unknown structure id: {value!r}") from None


@dataclass(frozen=True)
class StructureLayout:
    """Ordered (structure, node_count) blocks over the flat node index space."""

    blocks: tuple[tuple[Structure, int], ...]

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("layout needs at least one block")
        seen = []
        for structure, count in self.blocks:
            if count <= 0:
                raise ValueError(f"node count for {structure.name} must be positive, got {count}")
            seen.append(structure)
        order = [s for s in STRUCTURE_ORDER if s in seen]
        if seen != order or len(set(seen)) != len(seen):
            raise ValueError(f"blocks must follow canonical order {[s.name for s in STRUCTURE_ORDER]}")

    @property
    def total_nodes(self) -> int:
        return sum(count for _, count in self.blocks)

    @property
    def structures(self) -> tuple[Structure, ...]:
        return tuple(structure for structure, _ in self.blocks)

    def node_count(self, structure: Structure) -> int:
        for s, count in self.blocks:
            if s == structure:
                return count
        raise ValueError(f"structure {structure.name} not in layout")

    def block_slice(self, structure: Structure) -> slice:
        offset = 0
        for s, count in self.blocks:
            if s == structure:
                return slice(offset, offset + count)
            offset += count
        raise ValueError(f"structure {structure.name} not in layout")

    def truncated(self, structures: Sequence[Structure]) -> "StructureLayout":
        """Sub-layout keeping only ``structures``; must be a prefix of the block order."""
        kept = [(s, c) for s, c in self.blocks if s in structures]
        if [s for s, _ in kept] != list(self.structures[: len(kept)]):
            raise ValueError("layout truncation must remove a suffix of blocks")
        return StructureLayout(tuple(kept))


def build_layout(node_counts: Mapping) -> StructureLayout:
    """Build a layout from a structure→count mapping, reordering to canonical order."""
    counts = {}
    for key, value in node_counts.items():
        structure = _as_structure(key)
        if structure in counts:
            raise ValueError(f"duplicate structure {structure.name}")
        counts[structure] = int(value)
    blocks = tuple((s, counts[s]) for s in STRUCTURE_ORDER if s in counts)
    if len(blocks) != len(counts):
        raise ValueError("unknown structure in node_counts")
    return StructureLayout(blocks)


@dataclass(frozen=True)
class LabelAvailability:
    """The subset of structures whose annotation may be used for a sample."""

    present: frozenset

    def __post_init__(self):
        object.__setattr__(self, "present", frozenset(_as_structure(s) for s in self.present))

    @classmethod
    def of(cls, *structures) -> "LabelAvailability":
        return cls(frozenset(_as_structure(s) for s in structures))

    @classmethod
    def full(cls) -> "LabelAvailability":
        return cls(frozenset(STRUCTURE_ORDER))

    def __contains__(self, structure) -> bool:
        return _as_structure(structure) in self.present

    def __bool__(self) -> bool:
        return bool(self.present)

    def intersect(self, structures: Iterable[Structure]) -> "LabelAvailability":
        return LabelAvailability(self.present & frozenset(structures))

    def union(self, other: "LabelAvailability") -> "LabelAvailability":
        return LabelAvailability(self.present | other.present)

    def without(self, structure: Structure) -> "LabelAvailability":
        structure = _as_structure(structure)
        if structure not in self.present:
            raise ValueError(f"structure {structure.name} not available")
        return LabelAvailability(self.present - {structure})

    def names(self) -> list[str]:
        return [s.name for s in STRUCTURE_ORDER if s in self.present]


def availability_mask(layout: StructureLayout, avail: LabelAvailability) -> np.ndarray:
    """Per-node boolean vector: True iff the node's structure is available.

    Prefix availabilities reduce to plain index slicing; arbitrary subsets
    (e.g. lungs+clavicles without heart) come out non-contiguous.
    """
    for structure in avail.present:
        if structure not in layout.structures:
            raise ValueError(f"structure {structure.name} not in layout")
    mask = np.zeros(layout.total_nodes, dtype=bool)
    for structure in avail.present:
        mask[layout.block_slice(structure)] = True
    return mask


@dataclass(frozen=True)
class LandmarkSet:
    """A D×2 coordinate matrix tied to a layout, in [0,1] normalized units."""

    layout: StructureLayout
    coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.shape != (self.layout.total_nodes, 2):
            raise ValueError(
                f"coords shape {coords.shape} does not match layout with D={self.layout.total_nodes}"
            )
        if not np.all(np.isfinite(coords)):
            raise ValueError("coords must be finite")
        coords = coords.copy()
        coords.flags.writeable = False
        object.__setattr__(self, "coords", coords)

    def structure_coords(self, structure: Structure) -> np.ndarray:
        return self.coords[self.layout.block_slice(structure)]

    def denormalized(self, width: int, height: int) -> np.ndarray:
        """Pixel-space coordinates: x→x·W, y→y·H (pixel (r,c) spans [c,c+1)×[r,r+1))."""
        out = self.coords.copy()
        out[:, 0] *= width
        out[:, 1] *= height
        return out


@dataclass(frozen=True)
class ContourTopology:
    """Closed contour polylines per structure plus the derived graph operators.

    ``adjacency`` is the symmetric 0/1 matrix over all D nodes; ``operator``
    is the rescaled normalized Laplacian (eigenvalues in [-1, 1]) consumed by
    the spectral decoder.
    """

    layout: StructureLayout
    polylines: tuple[tuple[Structure, tuple[tuple[int, ...], ...]], ...]
    adjacency: np.ndarray = field(repr=False)
    operator: np.ndarray = field(repr=False)

    def structure_polylines(self, structure: Structure) -> tuple[tuple[int, ...], ...]:
        for s, polys in self.polylines:
            if s == structure:
                return polys
        return ()


def _rescaled_laplacian(adjacency: np.ndarray) -> np.ndarray:
    deg = adjacency.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1e-12)), 0.0)
    lap = np.eye(len(adjacency)) - inv_sqrt[:, None] * adjacency * inv_sqrt[None, :]
    lmax = float(np.linalg.eigvalsh(lap).max())
    if lmax <= 0:
        lmax = 2.0
    return (2.0 / lmax) * lap - np.eye(len(adjacency))


def build_contour_adjacency(
    layout: StructureLayout,
    polylines: Mapping,
) -> ContourTopology:
    """Assemble the topology from per-structure closed polylines.

    Each polyline is a sequence of ≥3 global node indices inside one block;
    consecutive nodes are connected and the last closes back to the first.
    """
    d = layout.total_nodes
    adjacency = np.zeros((d, d), dtype=np.float64)
    stored = []
    for key in polylines:
        structure = _as_structure(key)
        block = layout.block_slice(structure)
        polys = []
        for poly in polylines[key]:
            poly = tuple(int(i) for i in poly)
            if len(poly) < 3:
                raise ValueError(f"polyline for {structure.name} has {len(poly)} < 3 nodes")
            if len(set(poly)) != len(poly):
                raise ValueError(f"polyline for {structure.name} repeats a node")
            for idx in poly:
                if not (block.start <= idx < block.stop):
                    raise ValueError(
                        f"node {idx} of a {structure.name} polyline is outside block "
                        f"[{block.start}, {block.stop})"
                    )
            for a, b in zip(poly, poly[1:] + poly[:1]):
                adjacency[a, b] = 1.0
                adjacency[b, a] = 1.0
            polys.append(poly)
        stored.append((structure, tuple(polys)))
    stored.sort(key=lambda item: STRUCTURE_ORDER.index(item[0]))
    return ContourTopology(
        layout=layout,
        polylines=tuple(stored),
        adjacency=adjacency,
        operator=_rescaled_laplacian(adjacency),
    )


def topology_to_json(topology: ContourTopology) -> str:
    blocks = []
    for structure, count in topology.layout.blocks:
        blocks.append(
            {
                "structure": structure.name,
                "nodes": count,
                "polylines": [list(p) for p in topology.structure_polylines(structure)],
            }
        )
    return json.dumps({"blocks": blocks}, indent=2)


def topology_from_json(text: str) -> ContourTopology:
    doc = json.loads(text)
    blocks = doc.get("blocks")
    if not blocks:
        raise ValueError("topology document has no blocks")
    counts = {}
    polylines = {}
    for entry in blocks:
        structure = _as_structure(entry["structure"])
        counts[structure] = entry["nodes"]
        polylines[structure] = [tuple(p) for p in entry.get("polylines", [])]
    layout = build_layout(counts)
    return build_contour_adjacency(layout, polylines)


def default_layout() -> StructureLayout:
    """Desk-scale default: 40 lung, 20 heart, 16 clavicle nodes (D=76)."""
    return build_layout({Structure.LUNGS: 40, Structure.HEART: 20, Structure.CLAVICLES: 16})


def default_topology(layout: StructureLayout | None = None) -> ContourTopology:
    """Default polylines: paired organs split their block into two closed contours."""
    layout = layout or default_layout()
    polylines = {}
    for structure, count in layout.blocks:
        block = layout.block_slice(structure)
        if structure in (Structure.LUNGS, Structure.CLAVICLES):
            half = count // 2
            polylines[structure] = [
                tuple(range(block.start, block.start + half)),
                tuple(range(block.start + half, block.stop)),
            ]
        else:
            polylines[structure] = [tuple(range(block.start, block.stop))]
    return build_contour_adjacency(layout, polylines)
