"""Point-cloud value type and core geometric operations.

All geometry is 64-bit. Operations are pure functions: they return new
clouds and never mutate their inputs, so they are safe to call from any
number of concurrent workers. Randomized operations take an explicit
numpy Generator (see :func:`mvdg.common.derive_rng`).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import BadKError, DegenerateCloudWarning, EmptyCloudError


@dataclass(frozen=True)
class PointCloud:
    """A set of M points in model units with an optional class label.

    Attributes:
        points: (M, 3) float64 array. M >= 1, all coordinates finite.
        label: optional class id in [0, num_classes).
    """

    points: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (M, 3), got {pts.shape}")
        if pts.shape[0] == 0:
            raise EmptyCloudError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def with_points(self, points: np.ndarray) -> "PointCloud":
        """New cloud with the same label and different coordinates."""
        return PointCloud(points, self.label)


def normalize(cloud: PointCloud) -> PointCloud:
    """Center a cloud on its centroid and scale it to the unit sphere.

    The output centroid is the origin and the largest point norm is 1
    (unit-sphere fit). If all points coincide the scale is undefined; the
    cloud maps to all zeros and a DegenerateCloudWarning is issued.
    """
    centered = cloud.points - cloud.points.mean(axis=0)
    # sqrt(max of squared norms) == max of norms: sqrt is monotone and
    # correctly rounded, and the squared form skips a per-point sqrt pass.
    scale = math.sqrt(float(np.einsum("ij,ij->i", centered, centered).max()))
    if scale <= 0.0:
        warnings.warn(
            "all points coincide; normalized cloud is all zeros",
            DegenerateCloudWarning,
            stacklevel=2,
        )
        return cloud.with_points(np.zeros_like(centered))
    return cloud.with_points(centered / scale)


def rotate_z(cloud: PointCloud, angle: float) -> PointCloud:
    """Rotate a cloud about the +z axis by `angle` radians (right-handed)."""
    if not math.isfinite(angle):
        raise ValueError("rotation angle must be finite")
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return cloud.with_points(cloud.points @ rot.T)


def downsample(cloud: PointCloud, target: int, rng: np.random.Generator) -> PointCloud:
    """Resample a cloud to exactly `target` points.

    With M >= target this is uniform sampling without replacement. With
    M < target every original point is kept and the remainder is drawn
    with replacement, so the output is always a multiset of input points.
    """
    if target < 1:
        raise ValueError(f"target must be >= 1, got {target}")
    m = len(cloud)
    if m >= target:
        idx = rng.choice(m, size=target, replace=False)
    else:
        pad = rng.choice(m, size=target - m, replace=True)
        idx = np.concatenate([np.arange(m), pad])
    return cloud.with_points(cloud.points[idx])


def knn_indices(cloud: PointCloud, query: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k points closest to `query`, ascending by distance.

    Ties are broken by the lower point index, which keeps downstream
    augmentation reproducible. Brute force; fine for M <= 4096.
    """
    m = len(cloud)
    if k < 1 or k > m:
        raise BadKError(f"k must be in [1, {m}], got {k}")
    query = np.asarray(query, dtype=np.float64).reshape(3)
    dists = np.linalg.norm(cloud.points - query, axis=1)
    order = np.argsort(dists, kind="stable")
    return order[:k]
