"""Multi-view classifier: shared backbone, cross-view pooling, two heads.

A batch of view stacks (B, V, 1, R, R) is flattened to (B*V, 1, R, R) and
pushed through one shared backbone. The per-view feature maps are fused
across views by one of three poolings:

  depth    element-wise maximum over views (the default)
  average  element-wise mean over views
  view     fixed view groups (3 pairs + 2 triplets, canonical 6-view
           order) max-pooled per group, concatenated to 5C channels and
           fused back to C by a learned 1x1 convolution

The fused map feeds two branches. The average branch applies global
average pooling and a linear classifier. The strip branch splits the map
into horizontal bands at several scales, max-pools each band per channel,
passes every band through its own small FC + batch norm, and classifies
the concatenation. Training weights the two cross-entropy terms;
inference sums the branch softmaxes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import (
    BadConfigError,
    BadScaleError,
    BadWeightsError,
    ShapeMismatchError,
    WrongViewCountError,
)
from .nn import Tensor
from .nn.backbone import BackboneConfig, build_backbone

DEPTH_POOLING = "depth"
AVERAGE_POOLING = "average"
VIEW_POOLING = "view"
VIEW_POOLINGS = (DEPTH_POOLING, AVERAGE_POOLING, VIEW_POOLING)

# Index groups over the canonical 6-view order
# (+x right, -x left, +y front, -y back, +z top, -z bottom).
VIEW_GROUPS = (
    ("left-right", (1, 0)),
    ("top-bottom", (4, 5)),
    ("front-back", (2, 3)),
    ("top-front-left", (4, 2, 1)),
    ("bottom-back-right", (5, 3, 0)),
)


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    view_pooling: str = DEPTH_POOLING
    mmp_scales: tuple[int, ...] = (1, 2, 4, 8)
    strip_dim: int = 256
    num_classes: int = 10
    avg_branch_weight: float = 1.0
    strip_branch_weight: float = 1.0

    def __post_init__(self):
        if self.view_pooling not in VIEW_POOLINGS:
            raise BadConfigError(
                f"view_pooling must be one of {VIEW_POOLINGS}, got {self.view_pooling!r}"
            )
        if self.num_classes < 2:
            raise BadConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.strip_dim < 1:
            raise BadConfigError(f"strip_dim must be positive, got {self.strip_dim}")
        if not self.mmp_scales:
            raise BadConfigError("mmp_scales must not be empty")
        height = self.backbone.out_spatial[0]
        for n in self.mmp_scales:
            if n < 1 or height % n != 0:
                raise BadConfigError(
                    f"mmp scale {n} does not divide the feature height {height}"
                )
        if self.avg_branch_weight < 0 or self.strip_branch_weight < 0:
            raise BadConfigError("branch loss weights must be nonnegative")
        if self.avg_branch_weight + self.strip_branch_weight == 0:
            raise BadConfigError("at least one branch loss weight must be positive")

    @property
    def total_strips(self) -> int:
        return sum(self.mmp_scales)


def desk_model_config(num_classes: int = 6) -> ModelConfig:
    """Small profile for tests and CI: depth 9, width 16, 64x64 inputs, 4-row maps."""
    return ModelConfig(
        backbone=BackboneConfig(depth=9, width=16, resolution=64),
        mmp_scales=(1, 2, 4),
        strip_dim=64,
        num_classes=num_classes,
    )


def paper_model_config(num_classes: int = 10) -> ModelConfig:
    """Full-size profile: width 64, 128x128 inputs, scales (1,2,4,8)."""
    return ModelConfig(
        backbone=BackboneConfig(depth=18, width=64, resolution=128),
        mmp_scales=(1, 2, 4, 8),
        strip_dim=256,
        num_classes=num_classes,
    )


def model_config_from_dict(data: dict) -> ModelConfig:
    """Rebuild a ModelConfig from its JSON form (checkpoints, config files)."""
    if not isinstance(data, dict):
        raise BadConfigError(f"model config must be an object, got {type(data).__name__}")
    fields = dict(data)
    backbone = fields.pop("backbone", {})
    if not isinstance(backbone, dict):
        raise BadConfigError("model config field 'backbone' must be an object")
    scales = fields.pop("mmp_scales", None)
    if scales is not None:
        fields["mmp_scales"] = tuple(int(n) for n in scales)
    try:
        return ModelConfig(backbone=BackboneConfig(**backbone), **fields)
    except TypeError as exc:
        raise BadConfigError(f"bad model config: {exc}") from None


# ---------------------------------------------------------------------------
# cross-view pooling


def _view_axis(features: Tensor) -> int:
    if features.ndim == 4:
        return 0
    if features.ndim == 5:
        return 1
    raise ShapeMismatchError(
        f"expected view features (V,C,H,W) or (B,V,C,H,W), got {features.shape}"
    )


def depth_pool(features: Tensor) -> Tensor:
    """Element-wise max over the view axis; ties favor the lowest view."""
    return nn.max_along(features, axis=_view_axis(features))


def average_pool_views(features: Tensor) -> Tensor:
    return nn.mean_along(features, axis=_view_axis(features))


def view_group_maxes(features: Tensor) -> Tensor:
    """Per-group max features, concatenated channel-wise to 5C.

    Input must hold exactly 6 views in the canonical order; output drops
    the view axis. This is the view pooling minus its fusing convolution.
    """
    axis = _view_axis(features)
    if features.shape[axis] != 6:
        raise WrongViewCountError(
            f"view pooling needs exactly 6 canonical views, got {features.shape[axis]}"
        )
    batched = features.ndim == 5
    groups = []
    for _, idxs in VIEW_GROUPS:
        members = [features[:, i] if batched else features[i] for i in idxs]
        groups.append(nn.max_along(nn.stack(members, axis=axis), axis=axis))
    return nn.concat(groups, axis=1 if batched else 0)


# ---------------------------------------------------------------------------
# strip pooling


def strip_max_features(features: Tensor, scales) -> Tensor:
    """Per-band max vectors of a (B, C, H, W) map, pre-FC.

    For each scale n the H rows split into n contiguous bands, top first;
    each band max-pools over its (H/n) x W positions per channel. Bands
    are concatenated scale-major along a new last axis: output is
    (B, C, P) with P = sum(scales).
    """
    if features.ndim != 4:
        raise ShapeMismatchError(f"expected a (B, C, H, W) map, got {features.shape}")
    b, c, h, w = features.shape
    for n in scales:
        if n < 1 or h % n != 0:
            raise BadScaleError(f"scale {n} does not divide the feature height {h}")
    per_scale = []
    for n in scales:
        bands = features.reshape(b, c, n, (h // n) * w)
        per_scale.append(nn.max_along(bands, axis=3))
    return nn.concat(per_scale, axis=2)


class MultiScaleStripPool(nn.Module):
    """Strip branch embedding: per-strip FC + batch norm, concatenated.

    Output is (B, P * strip_dim) with strips in scale-major, top-first
    order, matching strip_max_features.
    """

    def __init__(self, channels: int, scales, strip_dim: int, *, rng):
        super().__init__()
        self.scales = tuple(scales)
        self.strip_fcs = nn.ModuleList(
            [nn.Linear(channels, strip_dim, rng=rng) for _ in range(sum(self.scales))]
        )
        self.strip_bns = nn.ModuleList(
            [nn.BatchNorm1d(strip_dim) for _ in range(sum(self.scales))]
        )

    def forward(self, features: Tensor) -> Tensor:
        maxes = strip_max_features(features, self.scales)
        embedded = []
        for j, (fc, bn) in enumerate(zip(self.strip_fcs, self.strip_bns)):
            embedded.append(bn(fc(maxes[:, :, j])))
        return nn.concat(embedded, axis=1)


# ---------------------------------------------------------------------------
# the classifier


class MultiViewClassifier(nn.Module):
    def __init__(self, config: ModelConfig, *, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.backbone = build_backbone(config.backbone, rng)
        channels = config.backbone.out_channels
        if config.view_pooling == VIEW_POOLING:
            self.view_fuse = nn.Conv2d(5 * channels, channels, 1, bias=True, rng=rng)
        else:
            self.view_fuse = None
        self.avg_fc = nn.Linear(channels, config.num_classes, rng=rng)
        self.strips = MultiScaleStripPool(
            channels, config.mmp_scales, config.strip_dim, rng=rng
        )
        self.strip_fc = nn.Linear(
            config.total_strips * config.strip_dim, config.num_classes, rng=rng
        )

    def pool_views(self, per_view: Tensor) -> Tensor:
        """Fuse (B, V, C, H, W) features into (B, C, H, W)."""
        mode = self.config.view_pooling
        if mode == DEPTH_POOLING:
            return depth_pool(per_view)
        if mode == AVERAGE_POOLING:
            return average_pool_views(per_view)
        return self.view_fuse(view_group_maxes(per_view))

    def forward(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """Map (B, V, 1, R, R) image stacks to two (B, N) logit tensors."""
        cfg = self.config.backbone
        if images.ndim != 5 or images.shape[2] != cfg.in_channels:
            raise ShapeMismatchError(
                f"expected images (B, V, {cfg.in_channels}, R, R), got {images.shape}"
            )
        b, v = images.shape[0], images.shape[1]
        flat = images.reshape(b * v, cfg.in_channels, images.shape[3], images.shape[4])
        per_view = self.backbone(flat)
        h, w = self.config.backbone.out_spatial
        per_view = per_view.reshape(b, v, self.config.backbone.out_channels, h, w)
        fused = self.pool_views(per_view)
        avg_logits = self.avg_fc(nn.global_avg_pool(fused))
        strip_logits = self.strip_fc(self.strips(fused))
        return avg_logits, strip_logits


def combined_loss(
    avg_logits: Tensor,
    strip_logits: Tensor,
    targets,
    avg_weight: float = 1.0,
    strip_weight: float = 1.0,
) -> tuple[Tensor, Tensor, Tensor]:
    """Weighted sum of the two branch cross-entropies.

    Returns (total, avg_branch_ce, strip_branch_ce); the total carries
    the backward graph of both branches.
    """
    if avg_weight < 0 or strip_weight < 0:
        raise BadWeightsError("branch loss weights must be nonnegative")
    if avg_weight + strip_weight == 0:
        raise BadWeightsError("at least one branch loss weight must be positive")
    ce_avg = nn.cross_entropy(avg_logits, targets)
    ce_strip = nn.cross_entropy(strip_logits, targets)
    return ce_avg * avg_weight + ce_strip * strip_weight, ce_avg, ce_strip


def fused_probabilities(model: MultiViewClassifier, images: Tensor) -> np.ndarray:
    """Sum of branch softmaxes, (B, N); the model should be in eval mode."""
    with nn.no_grad():
        avg_logits, strip_logits = model(images)
    return nn.softmax(avg_logits.data) + nn.softmax(strip_logits.data)


def predict(model: MultiViewClassifier, images: Tensor) -> np.ndarray:
    """Class ids by summed-softmax fusion; ties break to the lower id."""
    return np.argmax(fused_probabilities(model, images), axis=1)
