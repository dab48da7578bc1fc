"""Scan-defect augmentations: occlusion holes and non-uniform density.

A training sample is put into one of seven states with equal probability:
left untouched, a hole cut at one of three rates, or thinned toward one
of three density exponents. Both transforms return exact subsets of the
input points; no coordinate is invented or perturbed.

Hole transform:
    Pick a seed point uniformly, remove it together with its nearest
    neighbors, k = round(rate * M) points in total (half-away rounding).
    Simulates an occluded patch of the scan.

Density transform:
    Pick a viewpoint v uniformly on the unit sphere. With distances
    d_i = |p_i - v| min-max normalized to s_i in [0, 1], keep point i
    with probability max(0.1, (1 - s_i) ** g). Points near the viewpoint
    always survive; far points thin out, faster for larger g.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import warnings

from .errors import DegenerateCloudWarning, TooFewPointsError
from .common import round_half_away
from .geometry import PointCloud, knn_indices

HOLE_RATES = (0.24, 0.36, 0.45)
DENSITY_EXPONENTS = (1.3, 1.4, 1.6)

# Probability floor so no region is ever emptied completely.
KEEP_FLOOR = 0.1

# Minimum surviving cloud size; prevents degenerate projections and
# empty strips downstream.
MIN_POINTS = 64

IDENTITY = "identity"
HOLE = "hole"
DENSITY = "density"


@dataclass(frozen=True)
class TransformSpec:
    """One admissible augmentation state.

    kind is "identity", "hole" (param = drop rate) or "density"
    (param = exponent). The seven admissible states are enumerated by
    :func:`all_transform_states`.
    """

    kind: str
    param: float = 0.0

    def __post_init__(self):
        if self.kind not in (IDENTITY, HOLE, DENSITY):
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == HOLE and not 0.0 < self.param < 1.0:
            raise ValueError(f"hole rate must lie in (0, 1), got {self.param}")
        if self.kind == DENSITY and self.param < 1.0:
            raise ValueError(f"density exponent must be >= 1, got {self.param}")


def all_transform_states() -> tuple[TransformSpec, ...]:
    """The seven augmentation states: identity, three holes, three densities."""
    return (
        (TransformSpec(IDENTITY),)
        + tuple(TransformSpec(HOLE, r) for r in HOLE_RATES)
        + tuple(TransformSpec(DENSITY, g) for g in DENSITY_EXPONENTS)
    )


def sample_transform(rng: np.random.Generator) -> TransformSpec:
    """Draw one of the seven states uniformly (probability 1/7 each)."""
    states = all_transform_states()
    return states[int(rng.integers(len(states)))]


def apply_hole(cloud: PointCloud, rate: float, rng: np.random.Generator) -> PointCloud:
    """Remove a seed point and its nearest neighbors, round(rate*M) in total.

    The seed point itself counts toward the removed set: a scan occlusion
    hides the occluded point too. Raises TooFewPointsError before drawing
    anything if the survivor count would fall below MIN_POINTS.
    """
    m = len(cloud)
    if m < 2:
        raise TooFewPointsError("hole transform needs at least 2 points")
    k = round_half_away(rate * m)
    if k >= m:
        raise ValueError(f"drop count {k} would remove the entire cloud of {m}")
    if m - k < MIN_POINTS:
        raise TooFewPointsError(
            f"hole at rate {rate} would leave {m - k} < {MIN_POINTS} points"
        )
    if k == 0:
        return cloud.with_points(cloud.points)
    seed_idx = int(rng.integers(m))
    removed = knn_indices(cloud, cloud.points[seed_idx], k)
    keep = np.ones(m, dtype=bool)
    keep[removed] = False
    return cloud.with_points(cloud.points[keep])


def density_keep_probability(s: np.ndarray, exponent: float) -> np.ndarray:
    """Keep probability for normalized distance s in [0, 1]."""
    return np.maximum(KEEP_FLOOR, (1.0 - np.asarray(s)) ** exponent)


def apply_density(cloud: PointCloud, exponent: float, rng: np.random.Generator) -> PointCloud:
    """Thin a cloud with distance-dependent keep probabilities.

    The viewpoint is uniform on the unit sphere (radius 1 around the
    normalized cloud). If fewer than MIN_POINTS survive, the kept mask is
    redrawn up to 8 times, then the highest-probability points are kept
    outright. Clouds whose points are all equidistant from the viewpoint
    are returned unchanged with a DegenerateCloudWarning.
    """
    m = len(cloud)
    if m < 2:
        raise TooFewPointsError("density transform needs at least 2 points")
    if exponent < 1.0:
        raise ValueError(f"density exponent must be >= 1, got {exponent}")

    v = rng.normal(size=3)
    norm = np.linalg.norm(v)
    while norm == 0.0:  # probability zero, but keep the draw well defined
        v = rng.normal(size=3)
        norm = np.linalg.norm(v)
    v /= norm

    dists = np.linalg.norm(cloud.points - v, axis=1)
    dmin, dmax = float(dists.min()), float(dists.max())
    if dmax == dmin:
        warnings.warn(
            "all points equidistant from viewpoint; cloud kept unchanged",
            DegenerateCloudWarning,
            stacklevel=2,
        )
        return cloud.with_points(cloud.points)

    s = (dists - dmin) / (dmax - dmin)
    keep_p = density_keep_probability(s, exponent)

    floor = min(MIN_POINTS, m)
    for _ in range(8):
        mask = rng.random(m) < keep_p
        if int(mask.sum()) >= floor:
            return cloud.with_points(cloud.points[mask])
    # Deterministic fallback: the `floor` highest keep probabilities,
    # ties broken by lower index, original point order preserved.
    best = np.argsort(-keep_p, kind="stable")[:floor]
    best.sort()
    return cloud.with_points(cloud.points[best])


def apply_transform(
    cloud: PointCloud, spec: TransformSpec, rng: np.random.Generator
) -> PointCloud:
    """Apply one augmentation state to a cloud."""
    if spec.kind == IDENTITY:
        return cloud.with_points(cloud.points)
    if spec.kind == HOLE:
        return apply_hole(cloud, spec.param, rng)
    return apply_density(cloud, spec.param, rng)
