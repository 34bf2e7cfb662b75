"""Landmark-based vs pixel-based anatomical segmentation under heterogeneous
multi-center labels: models, objectives, data pipeline, metrics and harness."""

from .anatomy import (
    ContourTopology,
    LabelAvailability,
    LandmarkSet,
    Structure,
    StructureLayout,
    availability_mask,
    build_contour_adjacency,
    build_layout,
    default_layout,
    default_topology,
    topology_from_json,
    topology_to_json,
)
from .data import (
    Batch,
    CenterDataset,
    SampleRecord,
    SingleSourceSampler,
    Split,
    load_manifest,
    normalize_organ_scale,
    remove_labels,
    split,
)
from .errors import ConfigError, DataError, HeterosegError, TrainingDiverged
from .harness import (
    ExperimentConfig,
    RunArtifact,
    config_from_toml,
    config_to_toml,
    emit_overlays,
    evaluate,
    run_experiment,
    run_removal_suite,
)
from .latents import (
    EmbedMethod,
    EmbeddingResult,
    cluster_score,
    collect_latents,
    embed_2d,
    rescaled_latents,
    silhouette,
)
from .losses import (
    LossValue,
    binary_cross_entropy,
    het_pixel_loss,
    kl_latent,
    masked_landmark_mse,
    multiclass_loss,
    soft_dice_binary,
)
from .metrics import (
    MetricReport,
    MetricRow,
    PixelMode,
    decode_pixel_prediction,
    dice,
    hausdorff,
    landmark_mse,
)
from .models import (
    LandmarkModelConfig,
    LandmarkNet,
    LatentRecord,
    PixelModelConfig,
    UNet,
    extract_latent,
    landmark_forward,
    load_checkpoint,
    pixel_forward,
    save_checkpoint,
)
from .rasterize import StructureMasks, fill_contours, fill_polygon
from .synth import (
    ShapeRanges,
    SyntheticCenterSpec,
    default_synthetic_specs,
    generate_synthetic_centers,
)
from .training import OptimizerConfig, SETTINGS, TrainResult, train

__version__ = "0.1.0"
