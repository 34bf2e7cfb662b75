"""Latent collection, 2-D embedding for plots, and cluster separability.

Separability is always computed on the full-dimension vectors so it does not
depend on the choice of 2-D reducer; the embedding exists only for figures.
The built-in reducer is PCA; nonlinear reducers plug in through a CSV
round-trip (EXTERNAL) without becoming a dependency.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .data import normalize_organ_scale
from .models import LatentRecord, extract_latent


class EmbedMethod(Enum):
    PCA = "PCA"
    EXTERNAL = "EXTERNAL"


@dataclass(frozen=True)
class EmbeddingResult:
    points: np.ndarray  # N×2
    labels: tuple  # center ids
    method: EmbedMethod
    separability: float

    def __post_init__(self):
        if self.points.shape != (len(self.labels), 2):
            raise ValueError(
                f"points shape {self.points.shape} does not match {len(self.labels)} labels"
            )
        if not -1.0 <= self.separability <= 1.0:
            raise ValueError(f"separability {self.separability} outside [-1, 1]")


def collect_latents(model, datasets) -> list:
    """One LatentRecord per record of every dataset, in dataset order."""
    records = []
    for dataset in datasets:
        for record in dataset:
            records.append(extract_latent(model, record))
    if records:
        dim = records[0].vector.shape
        for rec in records:
            if rec.vector.shape != dim:
                raise ValueError("latent vectors have inconsistent dimensions")
    return records


def rescaled_latents(model, datasets, target_area: float) -> list:
    """Latents collected after normalizing every record's lung bbox area."""
    records = []
    for dataset in datasets:
        for record in dataset:
            records.append(extract_latent(model, normalize_organ_scale(record, target_area)))
    return records


def _vectors_and_labels(records):
    vectors = np.stack([r.vector for r in records]).astype(np.float64)
    labels = tuple(r.center_id for r in records)
    return vectors, labels


def silhouette(vectors: np.ndarray, labels) -> float:
    """Mean silhouette coefficient with Euclidean distances.

    For each point: a = mean distance to its own label's other members,
    b = smallest mean distance to any other label's members,
    s = (b − a) / max(a, b), with s = 0 when both a and b vanish.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = list(labels)
    n = len(labels)
    if vectors.shape[0] != n:
        raise ValueError("one label per vector required")
    unique = sorted(set(labels))
    if len(unique) < 2:
        raise ValueError("silhouette needs at least 2 distinct labels")
    counts = {u: labels.count(u) for u in unique}
    singles = [u for u, c in counts.items() if c < 2]
    if singles:
        raise ValueError(f"labels with a single member: {singles}")

    sq = (vectors * vectors).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (vectors @ vectors.T)
    dist = np.sqrt(np.maximum(d2, 0.0))
    member = {u: np.asarray([l == u for l in labels]) for u in unique}

    scores = np.zeros(n)
    for i in range(n):
        own = member[labels[i]].copy()
        own[i] = False
        a = dist[i, own].mean()
        b = min(dist[i, member[u]].mean() for u in unique if u != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def cluster_score(records_or_vectors, labels=None) -> float:
    """Silhouette of latent records (or a raw matrix + labels) by center label."""
    if labels is None:
        vectors, labels = _vectors_and_labels(list(records_or_vectors))
    else:
        vectors = np.asarray(records_or_vectors, dtype=np.float64)
    return silhouette(vectors, labels)


def pca_2d(vectors: np.ndarray) -> np.ndarray:
    """Projection onto the top-2 principal components of the mean-centered data.

    Component signs are fixed so the largest-magnitude loading is positive.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] < 2:
        raise ValueError("need N×d vectors with d ≥ 2")
    centered = vectors - vectors.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return centered @ comps.T


def embed_2d(records, method: EmbedMethod = EmbedMethod.PCA, external_path=None) -> EmbeddingResult:
    """2-D embedding of latent records plus the reducer-independent separability."""
    records = list(records)
    if len(records) < 3:
        raise ValueError(f"embedding needs ≥ 3 records, got {len(records)}")
    vectors, labels = _vectors_and_labels(records)
    score = silhouette(vectors, labels)
    if method is EmbedMethod.PCA:
        points = pca_2d(vectors)
    elif method is EmbedMethod.EXTERNAL:
        if external_path is None:
            raise ValueError("EXTERNAL embedding needs the reducer output CSV path")
        points = read_embedding_csv(external_path, expected_ids=[r.sample_id for r in records])
    else:
        raise ValueError(f"unknown embedding method {method!r}")
    return EmbeddingResult(points=points, labels=labels, method=method, separability=score)


# ---------------------------------------------------------------------------
# CSV and SVG emission
# ---------------------------------------------------------------------------

def write_latents_csv(records, path) -> None:
    records = list(records)
    dim = len(records[0].vector) if records else 0
    header = ["id", "center"] + [f"v{i}" for i in range(dim)]
    lines = [",".join(header)]
    for rec in records:
        lines.append(",".join([rec.sample_id, rec.center_id] + [repr(float(v)) for v in rec.vector]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_latents_csv(path) -> list:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"empty latents file {path}")
    out = []
    for line in lines[1:]:
        cells = line.split(",")
        out.append(
            LatentRecord(
                sample_id=cells[0],
                center_id=cells[1],
                vector=np.asarray([float(c) for c in cells[2:]]),
            )
        )
    return out


def write_embedding_csv(records, result: EmbeddingResult, path) -> None:
    lines = ["id,center,x,y"]
    for rec, (x, y) in zip(records, result.points):
        lines.append(f"{rec.sample_id},{rec.center_id},{float(x)!r},{float(y)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_embedding_csv(path, expected_ids=None) -> np.ndarray:
    """Read an external reducer's output: either 'x,y' rows or 'id,center,x,y'."""
    lines = [l for l in Path(path).read_text().splitlines() if l.strip()]
    if not lines:
        raise ValueError(f"empty embedding file {path}")
    rows = []
    ids = []
    start = 1 if any(c.isalpha() for c in lines[0].split(",")[-1]) else 0
    for line in lines[start:]:
        cells = line.split(",")
        if len(cells) >= 4:
            ids.append(cells[0])
            rows.append((float(cells[-2]), float(cells[-1])))
        elif len(cells) == 2:
            rows.append((float(cells[0]), float(cells[1])))
        else:
            raise ValueError(f"embedding row needs 2 or ≥4 columns: {line!r}")
    points = np.asarray(rows, dtype=np.float64)
    if expected_ids is not None:
        if len(points) != len(expected_ids):
            raise ValueError(
                f"external embedding has {len(points)} rows, expected {len(expected_ids)}"
            )
        if ids and ids != list(expected_ids):
            raise ValueError("external embedding ids do not match the latent records")
    return points


_PALETTE = ("#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377", "#bbbbbb")


def scatter_svg(result: EmbeddingResult, path, size: int = 480) -> None:
    """Write a minimal SVG scatter of the embedding, colored by center."""
    pts = result.points
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = np.where(hi - lo < 1e-12, 1.0, hi - lo)
    margin, radius = 40, 3.5
    inner = size - 2 * margin
    centers = sorted(set(result.labels))
    color = {c: _PALETTE[i % len(_PALETTE)] for i, c in enumerate(centers)}
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for (x, y), label in zip(pts, result.labels):
        px = margin + inner * (x - lo[0]) / span[0]
        py = size - margin - inner * (y - lo[1]) / span[1]
        parts.append(
            f'<circle cx="{px:.2f}" cy="{py:.2f}" r="{radius}" fill="{color[label]}" '
            f'fill-opacity="0.75"/>'
        )
    for i, center in enumerate(centers):
        ly = 20 + 16 * i
        parts.append(f'<circle cx="16" cy="{ly}" r="5" fill="{color[center]}"/>')
        parts.append(f'<text x="26" y="{ly + 4}" font-size="12" font-family="sans-serif">{center}</text>')
    parts.append(
        f'<text x="{size - 8}" y="{size - 8}" text-anchor="end" font-size="12" '
        f'font-family="sans-serif">separability {result.separability:.3f} ({result.method.value})</text>'
    )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
