"""Dataset records, manifest ingestion, splitting, batching and label removal.

A record keeps two views of its annotation. The training view (``landmarks``,
``masks``, ``availability``) has every structure outside the availability set
sentinel-filled or absent, so no loss can read it. The shadow view
(``shadow_landmarks``, ``shadow_masks``) keeps all ground truth that exists,
including structures artificially removed from training; evaluation reads
only the shadow view.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .anatomy import (
    ContourTopology,
    LabelAvailability,
    LandmarkSet,
    Structure,
    availability_mask,
    topology_from_json,
    topology_to_json,
)
from .errors import DataError
from .rasterize import fill_contours

#: Coordinate written into landmark rows whose structure is not available.
SENTINEL = -1.0


class Split(Enum):
    TRAINVAL = "TRAINVAL"
    TEST = "TEST"


def sentinel_fill(landmarks: LandmarkSet, avail: LabelAvailability) -> LandmarkSet:
    """Copy of ``landmarks`` with rows outside ``avail`` replaced by the sentinel."""
    mask = availability_mask(landmarks.layout, avail) if avail else np.zeros(
        landmarks.layout.total_nodes, dtype=bool
    )
    coords = np.array(landmarks.coords)
    coords[~mask] = SENTINEL
    return LandmarkSet(layout=landmarks.layout, coords=coords)


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    center_id: str
    image: np.ndarray
    landmarks: LandmarkSet
    masks: dict
    availability: LabelAvailability
    shadow_landmarks: LandmarkSet
    shadow_masks: dict
    split: Split | None = None

    @property
    def annotated(self) -> LabelAvailability:
        """Structures with ground truth present (availability plus removed ones)."""
        return LabelAvailability(frozenset(self.shadow_masks))

    @property
    def image_size(self) -> tuple[int, int]:
        return self.image.shape  # (H, W)


@dataclass(frozen=True)
class CenterDataset:
    center_id: str
    records: tuple
    availability: LabelAvailability

    def __post_init__(self):
        for record in self.records:
            if not record.availability.present <= self.availability.present:
                raise DataError(
                    f"record {record.sample_id} availability exceeds center {self.center_id}"
                )

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def make_record(
    sample_id: str,
    center_id: str,
    image: np.ndarray,
    gt_landmarks: LandmarkSet,
    gt_masks: dict,
    availability: LabelAvailability,
    annotated: LabelAvailability,
) -> SampleRecord:
    """Build a record from full ground truth, deriving the sentinel training view."""
    if not availability.present <= annotated.present:
        raise DataError(f"record {sample_id}: availability exceeds annotated structures")
    image = np.ascontiguousarray(image, dtype=np.float32)
    shadow_landmarks = sentinel_fill(gt_landmarks, annotated)
    shadow_masks = {s: np.asarray(gt_masks[s], dtype=bool) for s in annotated.present}
    return SampleRecord(
        sample_id=sample_id,
        center_id=center_id,
        image=image,
        landmarks=sentinel_fill(shadow_landmarks, availability),
        masks={s: shadow_masks[s] for s in availability.present},
        availability=availability,
        shadow_landmarks=shadow_landmarks,
        shadow_masks=shadow_masks,
    )


# ---------------------------------------------------------------------------
# Manifest ingestion
# ---------------------------------------------------------------------------

def _load_image(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"image file missing: {path}")
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    return arr


def _load_landmark_file(path: Path, layout, annotated: LabelAvailability) -> LandmarkSet:
    """Read "x y" lines covering the annotated structures in layout order."""
    if not path.is_file():
        raise DataError(f"landmark file missing: {path}")
    rows = []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"{path}:{line_no}: expected 'x y', got {line!r}")
        rows.append((float(parts[0]), float(parts[1])))
    expected = sum(layout.node_count(s) for s in layout.structures if s in annotated)
    if len(rows) != expected:
        raise DataError(
            f"{path}: {len(rows)} landmark rows, expected {expected} for "
            f"structures {annotated.names()}"
        )
    coords = np.full((layout.total_nodes, 2), SENTINEL, dtype=np.float64)
    cursor = 0
    for structure in layout.structures:
        if structure not in annotated:
            continue
        block = layout.block_slice(structure)
        count = block.stop - block.start
        coords[block] = rows[cursor : cursor + count]
        cursor += count
    return LandmarkSet(layout=layout, coords=coords)


@dataclass(frozen=True)
class ManifestData:
    topology: ContourTopology
    centers: tuple


def load_manifest(path) -> ManifestData:
    """Load a manifest JSON document and resolve all image and landmark files."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest file missing: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
    base = path.parent

    topo_entry = doc.get("topology")
    if topo_entry is None:
        raise DataError(f"manifest {path} lacks a 'topology' entry")
    if isinstance(topo_entry, str):
        topo_path = base / topo_entry
        if not topo_path.is_file():
            raise DataError(f"topology file missing: {topo_path}")
        topo_text = topo_path.read_text()
    else:
        topo_text = json.dumps(topo_entry)
    try:
        topology = topology_from_json(topo_text)
    except (ValueError, KeyError) as exc:
        raise DataError(f"invalid topology document: {exc}") from exc
    layout = topology.layout

    center_docs = doc.get("centers") or []
    if not center_docs:
        raise DataError(f"manifest {path} declares no centers")
    centers = []
    for entry in center_docs:
        center_id = entry.get("id")
        if not center_id:
            raise DataError("manifest center without an 'id'")
        try:
            availability = LabelAvailability.of(*entry["availability"])
            annotated = LabelAvailability.of(*entry.get("annotated", entry["availability"]))
        except (KeyError, ValueError) as exc:
            raise DataError(f"center {center_id}: bad availability: {exc}") from exc
        records = []
        for rec in entry.get("records", []):
            image_path = base / rec["image"]
            lm_path = base / rec["landmarks"]
            image = _load_image(image_path)
            gt = _load_landmark_file(lm_path, layout, annotated)
            height, width = image.shape
            gt_masks = fill_contours(gt, topology, height, width).masks
            gt_masks = {s: gt_masks[s] for s in annotated.present}
            records.append(
                make_record(
                    sample_id=rec.get("id", Path(rec["image"]).stem),
                    center_id=center_id,
                    image=image,
                    gt_landmarks=gt,
                    gt_masks=gt_masks,
                    availability=availability,
                    annotated=annotated,
                )
            )
        if not records:
            raise DataError(f"center {center_id} has no records")
        centers.append(
            CenterDataset(center_id=center_id, records=tuple(records), availability=availability)
        )
    return ManifestData(topology=topology, centers=tuple(centers))


def save_center_files(
    datasets,
    topology: ContourTopology,
    out_dir,
) -> Path:
    """Write images, landmark files, topology and manifest for the given centers.

    Landmark files carry rows for every annotated structure; the manifest's
    ``availability`` key records what training may use.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "landmarks").mkdir(parents=True, exist_ok=True)
    (out / "topology.json").write_text(topology_to_json(topology))
    layout = topology.layout
    manifest = {"topology": "topology.json", "centers": []}
    for dataset in datasets:
        entry = {
            "id": dataset.center_id,
            "availability": dataset.availability.names(),
            "records": [],
        }
        annotated_names = None
        for record in dataset.records:
            img_rel = f"images/{record.sample_id}.png"
            lm_rel = f"landmarks/{record.sample_id}.txt"
            arr = np.clip(np.rint(record.image * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr, mode="L").save(out / img_rel)
            lines = []
            for structure in layout.structures:
                if structure not in record.annotated:
                    continue
                for x, y in record.shadow_landmarks.structure_coords(structure):
                    lines.append(f"{float(x)!r} {float(y)!r}")
            (out / lm_rel).write_text("\n".join(lines) + "\n")
            entry["records"].append({"id": record.sample_id, "image": img_rel, "landmarks": lm_rel})
            annotated_names = record.annotated.names()
        if annotated_names and annotated_names != entry["availability"]:
            entry["annotated"] = annotated_names
        manifest["centers"].append(entry)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out / "manifest.json"


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def split(dataset: CenterDataset, fraction: float = 0.8, seed: int = 0):
    """Deterministic (trainval, test) partition with |trainval| = round(fraction·n)."""
    n = len(dataset)
    if n < 2:
        raise DataError(f"center {dataset.center_id} has {n} < 2 records, cannot split")
    k = int(round(fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    trainval_idx = np.sort(perm[:k])
    test_idx = np.sort(perm[k:])
    trainval = tuple(
        dataclasses.replace(dataset.records[i], split=Split.TRAINVAL) for i in trainval_idx
    )
    test = tuple(dataclasses.replace(dataset.records[i], split=Split.TEST) for i in test_idx)
    return (
        CenterDataset(dataset.center_id, trainval, dataset.availability),
        CenterDataset(dataset.center_id, test, dataset.availability),
    )


def carve_validation(records, fraction: float = 0.1, seed: int = 0):
    """Split a record tuple into (train, val); val may be empty for tiny sets."""
    n = len(records)
    k_val = int(round(fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = set(perm[:k_val].tolist())
    train = tuple(records[i] for i in range(n) if i not in val_idx)
    val = tuple(records[i] for i in sorted(val_idx))
    return train, val


# ---------------------------------------------------------------------------
# Single-source batch sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Batch:
    records: tuple
    center_id: str
    availability: LabelAvailability

    def __len__(self) -> int:
        return len(self.records)


class SingleSourceSampler:
    """Emits batches drawn from a single center at a time.

    Per epoch each center's records are shuffled and chunked (short final
    chunk kept), and the resulting batch slots are interleaved by a seeded
    shuffle, so center frequencies are proportional to center sizes. The
    whole schedule is a pure function of (seed, epoch).
    """

    def __init__(self, datasets, batch_size: int, seed: int = 0):
        if batch_size < 1:
            raise ValueError(f"batch_size must be ≥ 1, got {batch_size}")
        datasets = list(datasets)
        if not datasets:
            raise DataError("sampler needs at least one dataset")
        for dataset in datasets:
            if len(dataset) == 0:
                raise DataError(f"center {dataset.center_id} has no records")
        self.datasets = datasets
        self.batch_size = batch_size
        self.seed = seed

    def batches_for_epoch(self, epoch: int) -> list:
        rng = np.random.default_rng([int(self.seed), int(epoch)])
        queues = []
        slots = []
        for pos, dataset in enumerate(self.datasets):
            order = rng.permutation(len(dataset))
            chunks = [
                tuple(dataset.records[i] for i in order[start : start + self.batch_size])
                for start in range(0, len(dataset), self.batch_size)
            ]
            queues.append(chunks)
            slots.extend([pos] * len(chunks))
        slots = np.asarray(slots)
        rng.shuffle(slots)
        cursors = [0] * len(self.datasets)
        batches = []
        for pos in slots:
            dataset = self.datasets[pos]
            batches.append(
                Batch(
                    records=queues[pos][cursors[pos]],
                    center_id=dataset.center_id,
                    availability=dataset.availability,
                )
            )
            cursors[pos] += 1
        return batches

    def __iter__(self):
        epoch = 0
        while True:
            yield from self.batches_for_epoch(epoch)
            epoch += 1


# ---------------------------------------------------------------------------
# Artificial label removal
# ---------------------------------------------------------------------------

def remove_labels(dataset: CenterDataset, structure: Structure) -> CenterDataset:
    """Drop a structure from the training availability, keeping its shadow GT."""
    if structure not in dataset.availability:
        raise ValueError(
            f"structure {structure.name} not available in center {dataset.center_id}"
        )
    new_avail = dataset.availability.without(structure)
    records = []
    for record in dataset.records:
        rec_avail = record.availability.without(structure)
        records.append(
            dataclasses.replace(
                record,
                availability=rec_avail,
                landmarks=sentinel_fill(record.shadow_landmarks, rec_avail),
                masks={s: record.shadow_masks[s] for s in rec_avail.present},
            )
        )
    return CenterDataset(dataset.center_id, tuple(records), new_avail)


# ---------------------------------------------------------------------------
# Organ-scale normalization (bounding-box rescaling control)
# ---------------------------------------------------------------------------

def lung_bbox_area(record: SampleRecord) -> float:
    """Lung-landmark bounding-box area in squared pixels (shadow GT allowed)."""
    if Structure.LUNGS not in record.annotated:
        raise ValueError(f"record {record.sample_id} has no lung ground truth")
    height, width = record.image.shape
    pts = record.shadow_landmarks.denormalized(width, height)[
        record.shadow_landmarks.layout.block_slice(Structure.LUNGS)
    ]
    extent = pts.max(axis=0) - pts.min(axis=0)
    return float(extent[0] * extent[1])


def normalize_organ_scale(record: SampleRecord, target_area: float) -> SampleRecord:
    """Rescale a record about the image center so the lung bbox has target area.

    The image is resampled with the same affine scale (bilinear, edge padding,
    output kept at the original size); all annotated landmark rows and masks
    are transformed consistently. Sentinel rows stay sentinel.
    """
    from scipy import ndimage

    area = lung_bbox_area(record)
    if area <= 0:
        raise ValueError(f"record {record.sample_id} has a degenerate lung bounding box")
    scale = math.sqrt(target_area / area)
    height, width = record.image.shape

    # output pixel-space p_out = c + s·(p_in − c); sample input at c + (p_out − c)/s
    def affine(img, order):
        centers = np.array([height / 2.0, width / 2.0])
        offset = (0.5 - centers) / scale + centers - 0.5
        return ndimage.affine_transform(
            img.astype(np.float32),
            np.diag([1.0 / scale, 1.0 / scale]),
            offset=offset,
            order=order,
            mode="nearest",
            output=np.float32,
        )

    image = np.clip(affine(record.image, order=1), 0.0, 1.0)

    ann_mask = availability_mask(record.landmarks.layout, record.annotated)
    coords = np.array(record.shadow_landmarks.coords)
    coords[ann_mask] = 0.5 + scale * (coords[ann_mask] - 0.5)
    shadow_landmarks = LandmarkSet(layout=record.landmarks.layout, coords=coords)

    shadow_masks = {
        s: affine(mask, order=0) >= 0.5 for s, mask in record.shadow_masks.items()
    }
    return dataclasses.replace(
        record,
        image=image,
        landmarks=sentinel_fill(shadow_landmarks, record.availability),
        masks={s: shadow_masks[s] for s in record.availability.present},
        shadow_landmarks=shadow_landmarks,
        shadow_masks=shadow_masks,
    )
