"""Config-driven experiment runner: train → evaluate → report → artifacts.

A run is fully described by a TOML config; every default is materialized into
the resolved snapshot written next to the artifacts, so a run can always be
reproduced from its output directory alone.
"""
from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from PIL import Image

from .anatomy import Structure, default_layout
from .data import CenterDataset, load_manifest, remove_labels, split
from .errors import ConfigError, DataError
from .metrics import MetricReport, MetricRow, PixelMode, boundary_points, decode_pixel_prediction, dice, hausdorff, landmark_mse
from .models import (
    LandmarkModelConfig,
    LandmarkNet,
    PixelModelConfig,
    UNet,
    landmark_forward,
    load_checkpoint,
    pixel_forward,
    save_checkpoint,
)
from .rasterize import fill_contours
from .synth import default_synthetic_specs, generate_synthetic_centers, specs_from_json
from .training import OptimizerConfig, setting_structures, train, truncate_topology

MODEL_NAMES = ("hybridgnet", "unet", "unet_ht")
REMOVAL_NAMES = ("Exp1", "Exp2", "Exp3", "Exp4")


def apply_thread_cap() -> int:
    """Clamp torch to HETEROSEG_THREADS (default 1, for determinism)."""
    try:
        n = max(1, int(os.environ.get("HETEROSEG_THREADS", "1")))
    except ValueError:
        raise ConfigError(f"HETEROSEG_THREADS={os.environ['HETEROSEG_THREADS']!r} is not an integer")
    torch.set_num_threads(n)
    return n


@dataclass
class ExperimentConfig:
    model: str = "hybridgnet"
    setting: str = "LHC_full"
    removal: str | None = None
    seed: int = 0
    out_dir: str = "runs/experiment"
    overlays: bool = True

    manifest: str | None = None
    synthetic: str | None = "default"
    image_size: int = 64
    n_samples: int = 240
    split_fraction: float = 0.8
    val_fraction: float = 0.1
    split_seed: int = 0

    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    latent_dim: int = 32
    encoder_channels: tuple = (8, 16, 32, 32, 48)
    decoder_channels: tuple = (32, 32, 32, 32, 32)
    chebyshev_order: int = 6
    unet_channels: tuple = (8, 16, 32, 64)

    def __post_init__(self):
        if self.model not in MODEL_NAMES:
            raise ConfigError(f"model must be one of {MODEL_NAMES}, got {self.model!r}")
        try:
            setting_structures(self.setting)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.removal is not None:
            if self.removal not in REMOVAL_NAMES:
                raise ConfigError(f"removal must be one of {REMOVAL_NAMES}, got {self.removal!r}")
            if not self.setting.endswith("_full"):
                raise ConfigError(
                    f"removal experiments need a Full setting, got {self.setting!r}"
                )
        if (self.manifest is None) == (self.synthetic is None):
            raise ConfigError("exactly one of data.manifest / data.synthetic must be set")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError(f"split_fraction must be in (0,1), got {self.split_fraction}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in [0,1), got {self.val_fraction}")


_SECTION_FIELDS = {
    "experiment": ("model", "setting", "removal", "seed", "out_dir", "overlays"),
    "data": (
        "manifest",
        "synthetic",
        "image_size",
        "n_samples",
        "split_fraction",
        "val_fraction",
        "split_seed",
    ),
    "optimizer": ("lr", "epochs", "batch_size", "kl_weight", "lr_schedule"),
    "model_params": (
        "latent_dim",
        "encoder_channels",
        "decoder_channels",
        "chebyshev_order",
        "unet_channels",
    ),
}

_TUPLE_FIELDS = ("encoder_channels", "decoder_channels", "unet_channels")


def config_from_toml(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file missing: {path}")
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc
    kwargs = {}
    opt_kwargs = {}
    for section, keys in _SECTION_FIELDS.items():
        body = doc.pop(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key in list(body):
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            value = body.pop(key)
            if key in _TUPLE_FIELDS:
                value = tuple(value)
            if section == "optimizer":
                opt_kwargs[key] = value
            else:
                kwargs[key] = value
    if doc:
        raise ConfigError(f"unknown config sections: {sorted(doc)}")
    # empty strings mean "unset"; choosing a manifest drops the synthetic default
    for optional in ("removal", "manifest", "synthetic"):
        if kwargs.get(optional) == "":
            kwargs[optional] = None
    if kwargs.get("manifest") is not None and "synthetic" not in kwargs:
        kwargs["synthetic"] = None
    try:
        return ExperimentConfig(optimizer=OptimizerConfig(**opt_kwargs), **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _toml_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_toml_scalar(v) for v in value) + "]"
    text = str(value).replace("\\", "\\\\").replace('"', '\\"')
    return f'"{text}"'


def config_to_toml(config: ExperimentConfig) -> str:
    """Snapshot with every field materialized (omitting unset optional paths)."""
    lines = []
    for section, keys in _SECTION_FIELDS.items():
        lines.append(f"[{section}]")
        source = config.optimizer if section == "optimizer" else config
        for key in keys:
            value = getattr(source, key)
            if value is None:
                continue
            lines.append(f"{key} = {_toml_scalar(value)}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Data assembly
# ---------------------------------------------------------------------------

def load_data(config: ExperimentConfig):
    """(CenterDatasets, topology) per the config's data source."""
    if config.manifest is not None:
        manifest = load_manifest(config.manifest)
        return list(manifest.centers), manifest.topology
    if config.synthetic == "default":
        specs = default_synthetic_specs(config.n_samples)
        image_size = config.image_size
    else:
        specs, image_size = specs_from_json(config.synthetic)
    datasets, topology = generate_synthetic_centers(specs, image_size=image_size)
    return datasets, topology


def removal_target(datasets, removal: str):
    """(center_id, structure) removed by an Exp1..Exp4 analog.

    Exp1/Exp2 remove lungs/heart from the fully-annotated center; Exp3/Exp4
    remove lungs/heart from the two-structure (lungs+heart) center.
    """
    full = [d for d in datasets if len(d.availability.present) == 3]
    two = [
        d
        for d in datasets
        if d.availability.present == {Structure.LUNGS, Structure.HEART}
    ]
    if len(full) != 1 or len(two) != 1:
        raise DataError(
            "removal experiments need exactly one fully-annotated center and one "
            "lungs+heart center"
        )
    mapping = {
        "Exp1": (full[0].center_id, Structure.LUNGS),
        "Exp2": (full[0].center_id, Structure.HEART),
        "Exp3": (two[0].center_id, Structure.LUNGS),
        "Exp4": (two[0].center_id, Structure.HEART),
    }
    return mapping[removal]


def build_model(config: ExperimentConfig, topology, task_structures):
    """Construct the configured architecture for the task, seeding torch first."""
    torch.manual_seed(config.seed)
    size = (config.image_size, config.image_size)
    if config.model == "hybridgnet":
        task_topo = truncate_topology(topology, task_structures)
        return (
            LandmarkNet(
                LandmarkModelConfig(
                    input_size=size,
                    encoder_channels=config.encoder_channels,
                    latent_dim=config.latent_dim,
                    chebyshev_order=config.chebyshev_order,
                    decoder_channels=config.decoder_channels,
                ),
                task_topo,
            ),
            task_topo,
        )
    mode = PixelMode.MULTICLASS if config.model == "unet" else PixelMode.MULTILABEL_HT
    model = UNet(
        PixelModelConfig(
            input_size=size,
            channels=config.unet_channels,
            mode=mode,
            num_structures=len(task_structures),
            # the baseline that paints missing structures as background keeps
            # raw intensities; the masked-head variant normalizes them away
            standardize_input=mode is PixelMode.MULTILABEL_HT,
        ),
        tuple(task_structures),
    )
    return model, truncate_topology(topology, task_structures)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _predict_masks(model, record, task_topology):
    if isinstance(model, LandmarkNet):
        pred, _, _ = landmark_forward(model, record.image, stochastic=False)
        h, w = record.image.shape
        return fill_contours(pred, task_topology, h, w), pred
    scores = pixel_forward(model, record.image)
    return decode_pixel_prediction(scores, model.config.mode, model.structures), None


def evaluate(
    model,
    test_sets,
    task_topology,
    model_name: str,
    setting: str,
    removed_pairs=frozenset(),
) -> MetricReport:
    """Mean per-(center, structure) metrics over each center's test records.

    Rows exist only for structures with ground truth (shadow included), so
    removal cells stay evaluable. HD is averaged over the samples where it is
    defined; an all-empty column yields an empty cell.
    """
    task_structures = task_topology.layout.structures
    report = MetricReport()
    for dataset in test_sets:
        per_structure = {}
        for record in dataset:
            masks, pred_landmarks = _predict_masks(model, record, task_topology)
            h, w = record.image.shape
            for structure in task_structures:
                if structure not in record.annotated:
                    continue
                slot = per_structure.setdefault(structure, {"mse": [], "dice": [], "hd": []})
                gt_mask = record.shadow_masks[structure]
                slot["dice"].append(dice(masks[structure], gt_mask))
                slot["hd"].append(hausdorff(masks[structure], gt_mask))
                if pred_landmarks is not None:
                    gt = dataclasses.replace(
                        record.shadow_landmarks,
                        layout=task_topology.layout,
                        coords=record.shadow_landmarks.coords[: task_topology.layout.total_nodes],
                    )
                    slot["mse"].append(landmark_mse(pred_landmarks, gt, structure, w, h))
        for structure in task_structures:
            if structure not in per_structure:
                continue
            slot = per_structure[structure]
            hd_vals = [v for v in slot["hd"] if not math.isnan(v)]
            report.add(
                MetricRow(
                    model=model_name,
                    setting=setting,
                    center=dataset.center_id,
                    structure=structure,
                    mse=float(np.mean(slot["mse"])) if slot["mse"] else None,
                    dice=float(np.mean(slot["dice"])),
                    hd=float(np.mean(hd_vals)) if hd_vals else None,
                    removed=(dataset.center_id, structure) in removed_pairs,
                )
            )
    return report


# ---------------------------------------------------------------------------
# Overlays
# ---------------------------------------------------------------------------

_OVERLAY_COLORS = {
    Structure.LUNGS: (70, 200, 110),
    Structure.HEART: (235, 80, 80),
    Structure.CLAVICLES: (90, 130, 245),
}
_OVERLAY_SCALE = 4


def _draw_polyline(rgb: np.ndarray, points: np.ndarray, color) -> None:
    h, w = rgb.shape[:2]
    closed = np.vstack([points, points[:1]])
    for (x0, y0), (x1, y1) in zip(closed[:-1], closed[1:]):
        n = max(2, int(2 * math.hypot(x1 - x0, y1 - y0)))
        xs = np.clip(np.linspace(x0, x1, n), 0, w - 1).astype(int)
        ys = np.clip(np.linspace(y0, y1, n), 0, h - 1).astype(int)
        rgb[ys, xs] = color


def render_overlay(model, record, task_topology) -> np.ndarray:
    """RGB uint8 panel: input image with predicted contours or mask boundaries."""
    base = np.clip(record.image, 0.0, 1.0)
    big = np.kron(base, np.ones((_OVERLAY_SCALE, _OVERLAY_SCALE)))
    rgb = np.stack([big, big, big], axis=-1)
    rgb = (rgb * 255).astype(np.uint8)
    h, w = record.image.shape
    masks, pred_landmarks = _predict_masks(model, record, task_topology)
    if pred_landmarks is not None:
        px = pred_landmarks.denormalized(w, h) * _OVERLAY_SCALE
        for structure, polys in task_topology.polylines:
            for poly in polys:
                _draw_polyline(rgb, px[list(poly)], _OVERLAY_COLORS[structure])
    else:
        for structure in task_topology.layout.structures:
            pts = boundary_points(masks[structure])
            if len(pts):
                for r, c in pts * _OVERLAY_SCALE:
                    rgb[r : r + _OVERLAY_SCALE, c : c + _OVERLAY_SCALE] = _OVERLAY_COLORS[structure]
    return rgb


def emit_overlays(model, dataset, task_topology, out_dir) -> list:
    """One PNG per record; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for record in dataset:
        rgb = render_overlay(model, record, task_topology)
        path = out / f"{record.sample_id}.png"
        Image.fromarray(rgb).save(path)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Experiment driver
# ---------------------------------------------------------------------------

@dataclass
class RunArtifact:
    out_dir: Path
    checkpoint_path: Path
    report: MetricReport
    report_path: Path
    log_path: Path
    snapshot_path: Path
    overlay_dir: Path | None


def run_experiment(config: ExperimentConfig) -> RunArtifact:
    """Train per config, evaluate every center's test split, emit artifacts."""
    apply_thread_cap()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    snapshot_path = out / "config.toml"
    snapshot_path.write_text(config_to_toml(config))

    datasets, topology = load_data(config)
    removed_pairs = set()
    if config.removal is not None:
        center_id, structure = removal_target(datasets, config.removal)
        datasets = [
            remove_labels(d, structure) if d.center_id == center_id else d for d in datasets
        ]
        removed_pairs.add((center_id, structure))

    trainvals = []
    tests = []
    for i, dataset in enumerate(datasets):
        trainval, test = split(dataset, config.split_fraction, seed=[config.split_seed, i])
        trainvals.append(trainval)
        tests.append(test)

    task_structures, _ = setting_structures(config.setting)
    model, task_topology = build_model(config, topology, task_structures)

    log_path = out / "training_log.csv"
    trained = train(
        model,
        trainvals,
        config.setting,
        config.optimizer,
        seed=config.seed,
        val_fraction=config.val_fraction,
        log_path=log_path,
    )

    checkpoint_path = out / "checkpoint.npz"
    save_checkpoint(
        checkpoint_path,
        model,
        meta={
            "model": config.model,
            "setting": config.setting,
            "seed": config.seed,
            "split_fraction": config.split_fraction,
            "split_seed": config.split_seed,
            "image_size": config.image_size,
            "removal": config.removal or "",
            "best_epoch": trained.best_epoch,
        },
    )

    report = evaluate(
        model,
        tests,
        task_topology,
        model_name=config.model,
        setting=config.setting,
        removed_pairs=removed_pairs,
    )
    report_path = out / "report.csv"
    report_path.write_text(report.to_csv(include_removed=bool(removed_pairs)))

    overlay_dir = None
    if config.overlays:
        overlay_dir = out / "overlays"
        for test in tests:
            emit_overlays(model, test, task_topology, overlay_dir)

    return RunArtifact(
        out_dir=out,
        checkpoint_path=checkpoint_path,
        report=report,
        report_path=report_path,
        log_path=log_path,
        snapshot_path=snapshot_path,
        overlay_dir=overlay_dir,
    )


def run_removal_suite(base: ExperimentConfig):
    """Run Exp1..Exp4 off one base config; returns (artifacts, combined CSV path).

    The combined CSV prefixes an ``experiment`` column and carries the
    ``removed`` flag column marking each experiment's removed cell.
    """
    if not base.setting.endswith("_full"):
        raise ConfigError("removal suite needs a Full setting")
    datasets, _ = load_data(base)
    removal_target(datasets, "Exp1")  # validates center structure up front
    out = Path(base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    lines = ["experiment,model,setting,center,structure,mse,dice,hd,removed"]
    for name in REMOVAL_NAMES:
        sub = dataclasses.replace(base, removal=name, out_dir=str(out / name))
        artifact = run_experiment(sub)
        artifacts.append(artifact)
        body = artifact.report.to_csv(include_removed=True).splitlines()[1:]
        lines.extend(f"{name},{row}" for row in body)
    combined = out / "combined_report.csv"
    combined.write_text("\n".join(lines) + "\n")
    return artifacts, combined


def evaluate_checkpoint(checkpoint_path, datasets, topology, out_dir=None):
    """Re-evaluate a stored checkpoint on the test split it was trained against."""
    model, meta = load_checkpoint(checkpoint_path)
    setting = meta.get("setting", "LHC_full")
    task_structures, _ = setting_structures(setting)
    task_topology = truncate_topology(topology, task_structures)
    removed_pairs = set()
    if meta.get("removal"):
        center_id, structure = removal_target(datasets, meta["removal"])
        datasets = [
            remove_labels(d, structure) if d.center_id == center_id else d for d in datasets
        ]
        removed_pairs.add((center_id, structure))
    tests = []
    for i, dataset in enumerate(datasets):
        tests.append(split(dataset, meta.get("split_fraction", 0.8), seed=[meta.get("split_seed", 0), i])[1])
    report = evaluate(
        model,
        tests,
        task_topology,
        model_name=meta.get("model", "unknown"),
        setting=setting,
        removed_pairs=removed_pairs,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(report.to_csv(include_removed=bool(removed_pairs)))
    return report, model, task_topology, tests
