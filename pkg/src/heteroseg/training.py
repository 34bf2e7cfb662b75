"""Training loop: setting-aware dataset filtering, single-source batches,
masked objectives, validation-based model selection, per-step logging.

Settings name the target structure set and the dataset policy. Strict keeps
only centers annotated for every target structure; Full keeps every center
that has at least one of them and masks the objective per batch.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch

from .anatomy import (
    ContourTopology,
    LabelAvailability,
    Structure,
    availability_mask,
    build_contour_adjacency,
)
from .data import Batch, CenterDataset, SingleSourceSampler, carve_validation
from .errors import DataError, TrainingDiverged
from .losses import het_pixel_loss, kl_latent, masked_landmark_mse, multiclass_loss
from .metrics import PixelMode
from .models import LandmarkNet, UNet

SETTINGS = {
    "L": ((Structure.LUNGS,), False),
    "LH_strict": ((Structure.LUNGS, Structure.HEART), True),
    "LH_full": ((Structure.LUNGS, Structure.HEART), False),
    "LHC_strict": ((Structure.LUNGS, Structure.HEART, Structure.CLAVICLES), True),
    "LHC_full": ((Structure.LUNGS, Structure.HEART, Structure.CLAVICLES), False),
}


def setting_structures(setting: str):
    """(target structures, strict flag) for a setting name."""
    try:
        return SETTINGS[setting]
    except KeyError:
        raise ValueError(f"unknown setting {setting!r}; expected one of {sorted(SETTINGS)}") from None


def filter_datasets(datasets, setting: str):
    """Apply the Strict/Full dataset policy; raises if nothing survives."""
    targets, strict = setting_structures(setting)
    kept = []
    for dataset in datasets:
        if strict:
            if all(s in dataset.availability for s in targets):
                kept.append(dataset)
        elif any(s in dataset.availability for s in targets):
            kept.append(dataset)
    if not kept:
        raise DataError(f"no dataset remains after {setting} filtering")
    return kept


def truncate_topology(topology: ContourTopology, structures) -> ContourTopology:
    """Topology restricted to a block-order prefix of structures."""
    structures = tuple(structures)
    layout = topology.layout.truncated(structures)
    polylines = {s: topology.structure_polylines(s) for s in structures}
    return build_contour_adjacency(layout, polylines)


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    epochs: int = 300
    batch_size: int = 8
    kl_weight: float = 1e-5
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.kl_weight < 0:
            raise ValueError(f"invalid optimizer config: {self}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")


@dataclass
class TrainResult:
    model: torch.nn.Module
    log_rows: list
    best_epoch: int
    val_losses: list = field(default_factory=list)


def _images_tensor(records) -> torch.Tensor:
    return torch.stack(
        [torch.as_tensor(np.asarray(r.image), dtype=torch.float32) for r in records]
    ).unsqueeze(1)


def _landmark_loss(model: LandmarkNet, batch: Batch, kl_weight: float, stochastic: bool):
    layout = model.topology.layout
    avail = batch.availability.intersect(layout.structures)
    if not avail:
        raise DataError(f"batch from {batch.center_id} has no target structure")
    mask = availability_mask(layout, avail)
    d = layout.total_nodes
    target = torch.stack(
        [torch.tensor(r.landmarks.coords[:d], dtype=torch.float32) for r in batch.records]
    )
    coords, mu, logvar = model(_images_tensor(batch.records), stochastic=stochastic)
    loss = masked_landmark_mse(coords, target, mask)
    kl = kl_latent(mu, logvar)
    total = loss.total + kl_weight * kl
    return total, {"mse": float(loss.total.detach()), "kl": float(kl.detach())}


def _multiclass_loss(model: UNet, batch: Batch, structures):
    images = _images_tensor(batch.records)
    h, w = images.shape[-2:]
    labels = torch.zeros(len(batch.records), h, w, dtype=torch.long)
    # absent annotations stay background: the naive model's defining behavior
    for b, record in enumerate(batch.records):
        for i, structure in enumerate(structures):
            if structure in record.availability:
                labels[b][torch.as_tensor(record.masks[structure])] = i + 1
    logits = model(images)
    loss = multiclass_loss(logits, labels)
    return loss.total, loss.component_items()


def _ht_loss(model: UNet, batch: Batch, structures):
    avail = batch.availability.intersect(structures)
    if not avail:
        raise DataError(f"batch from {batch.center_id} has no target structure")
    images = _images_tensor(batch.records)
    probs_all = model(images)
    probs = {}
    targets = {}
    for i, structure in enumerate(structures):
        if structure not in avail:
            continue
        probs[structure] = probs_all[:, i]
        targets[structure] = torch.stack(
            [
                torch.as_tensor(np.asarray(r.masks[structure]), dtype=torch.float32)
                for r in batch.records
            ]
        )
    loss = het_pixel_loss(probs, targets, avail)
    return loss.total, loss.component_items()


def batch_loss(model, batch: Batch, kl_weight: float = 1e-5, stochastic: bool = True):
    """Setting-masked objective for one single-source batch."""
    if isinstance(model, LandmarkNet):
        return _landmark_loss(model, batch, kl_weight, stochastic)
    if model.config.mode is PixelMode.MULTICLASS:
        return _multiclass_loss(model, batch, model.structures)
    return _ht_loss(model, batch, model.structures)


def _validation_loss(model, val_batches, kl_weight: float) -> float:
    model.eval()
    total = 0.0
    count = 0
    with torch.no_grad():
        for batch in val_batches:
            loss, _ = batch_loss(model, batch, kl_weight, stochastic=False)
            total += float(loss) * len(batch)
            count += len(batch)
    model.train()
    return total / count


def _val_batches(val_records, batch_size: int):
    by_center = {}
    for record in val_records:
        by_center.setdefault(record.center_id, []).append(record)
    batches = []
    for center_id in sorted(by_center):
        records = by_center[center_id]
        avail = records[0].availability
        for start in range(0, len(records), batch_size):
            chunk = tuple(records[start : start + batch_size])
            batches.append(Batch(records=chunk, center_id=center_id, availability=avail))
    return batches


def train(
    model,
    datasets,
    setting: str,
    opt: OptimizerConfig,
    seed: int = 0,
    val_fraction: float = 0.1,
    log_path=None,
) -> TrainResult:
    """Train on the setting-filtered centers; returns the best-validation model.

    Deterministic for fixed (model init, datasets, config, seed) and thread
    count: batch order, reparameterization noise and optimizer state all
    derive from the seed. Non-finite losses abort with the failing step.
    """
    datasets = filter_datasets(datasets, setting)
    torch.manual_seed(seed)

    train_sets = []
    val_records = []
    for i, dataset in enumerate(datasets):
        train_recs, val_recs = carve_validation(dataset.records, val_fraction, seed=[seed, i])
        if not train_recs:
            raise DataError(f"center {dataset.center_id} has no training records left")
        train_sets.append(CenterDataset(dataset.center_id, train_recs, dataset.availability))
        val_records.extend(val_recs)
    val_batches = _val_batches(val_records, opt.batch_size)

    sampler = SingleSourceSampler(train_sets, opt.batch_size, seed=seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=opt.lr)
    scheduler = None
    if opt.lr_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=opt.epochs)

    model.train()
    log_rows = []
    val_losses = []
    best_epoch = -1
    best_val = float("inf")
    best_state = None
    step = 0
    for epoch in range(opt.epochs):
        for batch in sampler.batches_for_epoch(epoch):
            optimizer.zero_grad()
            try:
                loss, components = batch_loss(model, batch, opt.kl_weight, stochastic=True)
            except ValueError as exc:
                # non-finite activations or latents mean the run blew up;
                # any other ValueError is a configuration mistake and propagates
                if "finite" not in str(exc):
                    raise
                raise TrainingDiverged(step, batch.center_id, str(exc)) from exc
            if not torch.isfinite(loss):
                raise TrainingDiverged(step, batch.center_id, f"loss={float(loss)!r}")
            loss.backward()
            optimizer.step()
            row = {"epoch": epoch, "step": step, "center": batch.center_id,
                   "total": float(loss.detach())}
            row.update(components)
            log_rows.append(row)
            step += 1
        if val_batches:
            val = _validation_loss(model, val_batches, opt.kl_weight)
            val_losses.append(val)
            if val < best_val:
                best_val = val
                best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
        if scheduler is not None:
            scheduler.step()
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = opt.epochs - 1
    model.eval()
    if log_path is not None:
        write_training_log(log_rows, log_path)
    return TrainResult(model=model, log_rows=log_rows, best_epoch=best_epoch, val_losses=val_losses)


def write_training_log(log_rows, path) -> None:
    """CSV log with one row per optimization step; floats via repr for exactness."""
    keys = ["epoch", "step", "center", "total"]
    extra = sorted({k for row in log_rows for k in row} - set(keys))
    header = keys + extra
    lines = [",".join(header)]
    for row in log_rows:
        cells = []
        for key in header:
            value = row.get(key, "")
            cells.append(repr(value) if isinstance(value, float) else str(value))
        lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"
    with open(path, "w") as fh:
        fh.write(text)
