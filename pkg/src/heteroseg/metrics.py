"""Evaluation metrics (MSE, Dice, HD) and the per-structure report table."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree

from .anatomy import LandmarkSet, Structure
from .rasterize import StructureMasks


class PixelMode(Enum):
    MULTICLASS = "MULTICLASS"
    MULTILABEL_HT = "MULTILABEL_HT"


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap 2|a∩b|/(|a|+|b|); two empty masks count as 1."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary_points(mask: np.ndarray) -> np.ndarray:
    """(r, c) coordinates of foreground pixels with a background 4-neighbor.

    Pixels on the image frame count as boundary (the outside is background).
    """
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(mask & ~interior)


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Hausdorff distance between boundary point sets, in pixels.

    Undefined (NaN) when either mask is empty; callers report that as a
    missing value.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    pa = boundary_points(a)
    pb = boundary_points(b)
    if len(pa) == 0 or len(pb) == 0:
        return math.nan
    d_ab = cKDTree(pb).query(pa)[0].max()
    d_ba = cKDTree(pa).query(pb)[0].max()
    return float(max(d_ab, d_ba))


def landmark_mse(
    pred: LandmarkSet,
    gt: LandmarkSet,
    structure: Structure,
    width: int,
    height: int,
) -> float:
    """Mean squared coordinate error for one structure, in squared pixels.

    The mean runs over the 2·N scalar coordinate entries of the structure's
    nodes at the given evaluation resolution.
    """
    if pred.layout.blocks != gt.layout.blocks:
        raise ValueError("pred and gt landmark sets use different layouts")
    if structure not in gt.layout.structures:
        raise ValueError(f"structure {structure.name} missing from ground truth layout")
    diff = pred.denormalized(width, height)[pred.layout.block_slice(structure)] - gt.denormalized(
        width, height
    )[gt.layout.block_slice(structure)]
    return float(np.mean(diff * diff))


def decode_pixel_prediction(scores: np.ndarray, mode: PixelMode, structures) -> StructureMasks:
    """Turn per-channel score maps into independent binary structure masks.

    MULTILABEL_HT: per-channel sigmoid probabilities thresholded at ≥ 0.5.
    MULTICLASS: argmax over channels (channel 0 = background), then one map
    per foreground structure.
    """
    scores = np.asarray(scores, dtype=np.float64)
    structures = list(structures)
    if scores.ndim != 3:
        raise ValueError(f"scores must be (C, H, W), got shape {scores.shape}")
    if mode == PixelMode.MULTILABEL_HT:
        if scores.shape[0] != len(structures):
            raise ValueError(f"expected {len(structures)} channels, got {scores.shape[0]}")
        return StructureMasks(masks={s: scores[i] >= 0.5 for i, s in enumerate(structures)})
    if mode == PixelMode.MULTICLASS:
        if scores.shape[0] != len(structures) + 1:
            raise ValueError(f"expected {len(structures) + 1} channels, got {scores.shape[0]}")
        labels = scores.argmax(axis=0)
        return StructureMasks(masks={s: labels == i + 1 for i, s in enumerate(structures)})
    raise ValueError(f"unknown pixel mode: {mode!r}")


REPORT_COLUMNS = ("model", "setting", "center", "structure", "mse", "dice", "hd")


@dataclass
class MetricRow:
    model: str
    setting: str
    center: str
    structure: Structure
    mse: float | None
    dice: float | None
    hd: float | None
    removed: bool = False


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float) and math.isnan(value):
        return ""
    return str(value)


@dataclass
class MetricReport:
    """Per-(model, setting, center, structure) metric table mirroring Table 1/2."""

    rows: list = field(default_factory=list)

    def add(self, row: MetricRow):
        self.rows.append(row)

    def extend(self, other: "MetricReport"):
        self.rows.extend(other.rows)

    def to_csv(self, include_removed: bool = False) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = list(REPORT_COLUMNS) + (["removed"] if include_removed else [])
        writer.writerow(header)
        for row in self.rows:
            record = [
                row.model,
                row.setting,
                row.center,
                row.structure.name,
                _cell(row.mse),
                _cell(row.dice),
                _cell(row.hd),
            ]
            if include_removed:
                record.append("1" if row.removed else "0")
            writer.writerow(record)
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["| " + " | ".join(REPORT_COLUMNS) + " |", "|" + "---|" * len(REPORT_COLUMNS)]
        for row in self.rows:
            lines.append(
                "| "
                + " | ".join(
                    [
                        row.model,
                        row.setting,
                        row.center,
                        row.structure.name,
                        _cell(row.mse) or "-",
                        _cell(row.dice) or "-",
                        _cell(row.hd) or "-",
                    ]
                )
                + " |"
            )
        return "\n".join(lines) + "\n"

    def lookup(self, center: str, structure: Structure) -> MetricRow:
        for row in self.rows:
            if row.center == center and row.structure == structure:
                return row
        raise KeyError(f"no row for ({center}, {structure.name})")

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if tuple(header[: len(REPORT_COLUMNS)]) != REPORT_COLUMNS:
            raise ValueError(f"unexpected report header: {header}")
        has_removed = len(header) > len(REPORT_COLUMNS) and header[len(REPORT_COLUMNS)] == "removed"
        report = cls()
        for record in reader:
            if not record:
                continue
            model, setting, center, structure, mse, dc, hd = record[: len(REPORT_COLUMNS)]
            report.add(
                MetricRow(
                    model=model,
                    setting=setting,
                    center=center,
                    structure=Structure[structure],
                    mse=float(mse) if mse else None,
                    dice=float(dc) if dc else None,
                    hd=float(hd) if hd else None,
                    removed=bool(int(record[len(REPORT_COLUMNS)])) if has_removed else False,
                )
            )
        return report
