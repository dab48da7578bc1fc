"""Point-cloud classification through multi-view depth images.

The pipeline: normalize a cloud, optionally put it through one of seven
scan-defect augmentation states, rotate it about z, resample to a fixed
point count, render orthographic depth images from a fixed view set,
push the views through a shared truncated residual backbone, fuse them
by cross-view pooling, and classify with two cooperating heads (global
average pooling and multi-scale strip pooling). Training only ever sees
the clean source domain; the augmentations stand in for the defects of
the unseen target domain.

Everything here is deterministic given a seed: randomness is derived
from explicit key tuples, never from global state.
"""

from .augment import (
    DENSITY_EXPONENTS,
    HOLE_RATES,
    TransformSpec,
    all_transform_states,
    apply_density,
    apply_hole,
    apply_transform,
    density_keep_probability,
    sample_transform,
)
from .common import derive_rng
from .evaluation import evaluate, metrics, utilization
from .geometry import PointCloud, downsample, knn_indices, normalize, rotate_z
from .model import (
    ModelConfig,
    MultiViewClassifier,
    combined_loss,
    desk_model_config,
    fused_probabilities,
    model_config_from_dict,
    paper_model_config,
    predict,
)
from .nn.backbone import BackboneConfig
from .projection import DepthImageStack, ViewSet, project, to_pgm_bytes, view_basis
from .synthetic import default_family_specs, generate_synthetic
from .training import (
    TrainConfig,
    build_model,
    fit,
    load_model_checkpoint,
    multi_seed_run,
    train_config_from_dict,
)

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "DENSITY_EXPONENTS",
    "DepthImageStack",
    "HOLE_RATES",
    "ModelConfig",
    "MultiViewClassifier",
    "PointCloud",
    "TrainConfig",
    "TransformSpec",
    "ViewSet",
    "all_transform_states",
    "apply_density",
    "apply_hole",
    "apply_transform",
    "build_model",
    "combined_loss",
    "default_family_specs",
    "density_keep_probability",
    "derive_rng",
    "desk_model_config",
    "downsample",
    "evaluate",
    "fit",
    "fused_probabilities",
    "generate_synthetic",
    "knn_indices",
    "load_model_checkpoint",
    "metrics",
    "model_config_from_dict",
    "multi_seed_run",
    "normalize",
    "paper_model_config",
    "predict",
    "project",
    "rotate_z",
    "sample_transform",
    "to_pgm_bytes",
    "train_config_from_dict",
    "utilization",
    "view_basis",
]
