"""Procedural 6-class shape dataset for source-to-target experiments.

Each class is a parametric surface family (sphere, box, cylinder, cone,
torus, pyramid). Instances are sampled uniformly by surface area,
squashed by a random per-axis scale (so no two instances are congruent),
jittered with Gaussian noise, and normalized to the unit sphere.

The source split is clean. The companion target split draws fresh,
denser samples and corrupts every cloud with one of two held-out
deformations, alternating by sample index: a hole at drop rate 0.5 or a
density falloff with exponent 2.0. Both parameters sit outside the
augmentation grid used at training time, so a model only generalizes to
the target by tolerating unseen corruption levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import apply_density, apply_hole
from .common import derive_rng
from .dataio import (
    SOURCE_ROLE,
    TARGET_ROLE,
    TEST_SPLIT,
    TRAIN_SPLIT,
    DatasetManifest,
    ManifestEntry,
    save_manifest,
    write_cloud,
)
from .errors import BadConfigError
from .geometry import PointCloud, normalize

HELD_OUT_HOLE_RATE = 0.5
HELD_OUT_DENSITY_EXPONENT = 2.0

# Target clouds are sampled at twice the source density so that the
# hole deformation leaves them near the source point count.
TARGET_OVERSAMPLE = 2

# Stream tags keep generator keys disjoint from the training loop's.
_STREAM_TRAIN, _STREAM_TEST, _STREAM_TARGET = 100, 101, 102

_FAMILY_ARITY = {
    "sphere": 1,  # radius
    "box": 3,  # half extents
    "cylinder": 2,  # radius, height
    "cone": 2,  # base radius, height
    "torus": 2,  # major radius, minor radius
    "pyramid": 2,  # base half width, height
}


@dataclass(frozen=True)
class SyntheticShapeSpec:
    family: str
    params: tuple[float, ...]
    sample_count: int = 1024
    jitter: float = 0.01
    anisotropy: float = 0.2

    def __post_init__(self):
        if self.family not in _FAMILY_ARITY:
            raise BadConfigError(f"unknown shape family {self.family!r}")
        if len(self.params) != _FAMILY_ARITY[self.family]:
            raise BadConfigError(
                f"{self.family} takes {_FAMILY_ARITY[self.family]} size parameters, "
                f"got {len(self.params)}"
            )
        if any(p <= 0 for p in self.params):
            raise BadConfigError(f"{self.family}: size parameters must be positive")
        if self.sample_count < 256:
            raise BadConfigError(f"sample_count must be >= 256, got {self.sample_count}")
        if self.jitter < 0:
            raise BadConfigError(f"jitter must be >= 0, got {self.jitter}")
        if not 0.0 <= self.anisotropy < 1.0:
            raise BadConfigError(f"anisotropy must lie in [0, 1), got {self.anisotropy}")


def default_family_specs(
    sample_count: int = 1024, jitter: float = 0.01, anisotropy: float = 0.2
) -> tuple[SyntheticShapeSpec, ...]:
    """The six stock classes, distinguishable by silhouette from any axis."""
    mk = lambda fam, params: SyntheticShapeSpec(
        fam, params, sample_count=sample_count, jitter=jitter, anisotropy=anisotropy
    )
    return (
        mk("sphere", (1.0,)),
        mk("box", (1.0, 0.7, 0.5)),
        mk("cylinder", (0.4, 1.4)),
        mk("cone", (0.55, 1.2)),
        mk("torus", (0.7, 0.25)),
        mk("pyramid", (0.6, 1.1)),
    )


# ---------------------------------------------------------------------------
# per-family surface samplers (uniform by area, centered at the origin)


def _sample_sphere(rng, n, params):
    (radius,) = params
    v = rng.normal(size=(n, 3))
    v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
    return radius * v


def _sample_box(rng, n, params):
    hx, hy, hz = params
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    for f, (fixed_axis, sign) in enumerate(
        [(0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)]
    ):
        mask = face == f
        free = [a for a in range(3) if a != fixed_axis]
        half = (hx, hy, hz)
        pts[mask, fixed_axis] = sign * half[fixed_axis]
        pts[mask, free[0]] = u[mask, 0] * half[free[0]]
        pts[mask, free[1]] = u[mask, 1] * half[free[1]]
    return pts


def _sample_cylinder(rng, n, params):
    radius, height = params
    lateral = 2.0 * math.pi * radius * height
    cap = math.pi * radius * radius
    total = lateral + 2 * cap
    part = rng.choice(3, size=n, p=[lateral / total, cap / total, cap / total])
    u1 = rng.random(n)
    u2 = rng.random(n)
    theta = 2.0 * math.pi * u1
    pts = np.empty((n, 3))
    side = part == 0
    pts[side, 0] = radius * np.cos(theta[side])
    pts[side, 1] = radius * np.sin(theta[side])
    pts[side, 2] = (u2[side] - 0.5) * height
    for which, sign in ((1, 1.0), (2, -1.0)):
        mask = part == which
        rho = radius * np.sqrt(u2[mask])
        pts[mask, 0] = rho * np.cos(theta[mask])
        pts[mask, 1] = rho * np.sin(theta[mask])
        pts[mask, 2] = sign * height / 2.0
    return pts


def _sample_cone(rng, n, params):
    radius, height = params
    slant = math.hypot(radius, height)
    lateral = math.pi * radius * slant
    base = math.pi * radius * radius
    part = rng.choice(2, size=n, p=[lateral / (lateral + base), base / (lateral + base)])
    u1 = rng.random(n)
    u2 = rng.random(n)
    theta = 2.0 * math.pi * u1
    pts = np.empty((n, 3))
    side = part == 0
    # Slant fraction from the apex; area grows with the square, so sqrt
    # makes the sampling uniform per unit surface.
    t = np.sqrt(u2[side])
    pts[side, 0] = t * radius * np.cos(theta[side])
    pts[side, 1] = t * radius * np.sin(theta[side])
    pts[side, 2] = height / 2.0 - t * height
    disc = ~side
    rho = radius * np.sqrt(u2[disc])
    pts[disc, 0] = rho * np.cos(theta[disc])
    pts[disc, 1] = rho * np.sin(theta[disc])
    pts[disc, 2] = -height / 2.0
    return pts


def _sample_torus(rng, n, params):
    major, minor = params
    u = 2.0 * math.pi * rng.random(n)
    # The tube angle is non-uniform by area (outer rim is larger), so
    # rejection-sample it against the (major + minor*cos v) density.
    v = np.empty(n)
    pending = np.arange(n)
    while pending.size:
        prop = 2.0 * math.pi * rng.random(pending.size)
        accept = rng.random(pending.size) <= (major + minor * np.cos(prop)) / (major + minor)
        v[pending[accept]] = prop[accept]
        pending = pending[~accept]
    ring = major + minor * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)


def _sample_pyramid(rng, n, params):
    half, height = params
    apex = np.array([0.0, 0.0, height / 2.0])
    z0 = -height / 2.0
    corners = [
        np.array([-half, -half, z0]),
        np.array([half, -half, z0]),
        np.array([half, half, z0]),
        np.array([-half, half, z0]),
    ]
    base_area = 4.0 * half * half
    tri_area = half * math.hypot(half, height)
    areas = np.array([base_area] + [tri_area] * 4)
    part = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.random(n)
    v = rng.random(n)
    pts = np.empty((n, 3))
    on_base = part == 0
    pts[on_base, 0] = (u[on_base] * 2.0 - 1.0) * half
    pts[on_base, 1] = (v[on_base] * 2.0 - 1.0) * half
    pts[on_base, 2] = z0
    for f in range(4):
        mask = part == f + 1
        a, b = u[mask], v[mask]
        flip = a + b > 1.0
        a = np.where(flip, 1.0 - a, a)
        b = np.where(flip, 1.0 - b, b)
        p1 = corners[f] - apex
        p2 = corners[(f + 1) % 4] - apex
        pts[mask] = apex + a[:, None] * p1 + b[:, None] * p2
    return pts


_SAMPLERS = {
    "sphere": _sample_sphere,
    "box": _sample_box,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
    "torus": _sample_torus,
    "pyramid": _sample_pyramid,
}


def sample_surface(spec: SyntheticShapeSpec, rng: np.random.Generator, count=None):
    """Raw area-uniform surface points for a spec, before any distortion."""
    return _SAMPLERS[spec.family](rng, count or spec.sample_count, spec.params)


def sample_shape(
    spec: SyntheticShapeSpec, rng: np.random.Generator, count=None
) -> PointCloud:
    """One randomized instance: surface points, per-axis squash, jitter."""
    pts = sample_surface(spec, rng, count)
    if spec.anisotropy > 0:
        pts = pts * rng.uniform(1.0 - spec.anisotropy, 1.0 + spec.anisotropy, size=3)
    if spec.jitter > 0:
        pts = pts + rng.normal(0.0, spec.jitter, size=pts.shape)
    return normalize(PointCloud(pts))


def deform_target_cloud(cloud: PointCloud, index: int, rng) -> PointCloud:
    """Held-out corruption: even indices get the hole, odd the density."""
    if index % 2 == 0:
        return apply_hole(cloud, HELD_OUT_HOLE_RATE, rng)
    return apply_density(cloud, HELD_OUT_DENSITY_EXPONENT, rng)


def generate_synthetic(
    specs,
    out_dir,
    *,
    per_class_train: int,
    per_class_test: int = 50,
    per_class_target: int = 100,
    seed: int = 0,
) -> tuple[DatasetManifest, DatasetManifest]:
    """Write a source dataset and its deformed target counterpart.

    Produces out_dir/clouds/*.pcb plus source.json and target.json
    manifests. Every cloud gets its own generator stream keyed by (seed,
    stream, class, index), so outputs are reproducible no matter the
    write order. Returns the loaded-form manifests.
    """
    specs = tuple(specs)
    if len(specs) < 2:
        raise BadConfigError(f"need at least 2 shape families, got {len(specs)}")
    if per_class_train < 1 or per_class_target < 1 or per_class_test < 0:
        raise BadConfigError("per-class counts must be positive")

    out_dir = Path(out_dir)
    cloud_dir = out_dir / "clouds"
    cloud_dir.mkdir(parents=True, exist_ok=True)
    classes = tuple(s.family for s in specs)
    if len(set(classes)) != len(classes):
        raise BadConfigError("each class needs a distinct family")

    source_entries = []
    target_entries = []
    for ci, spec in enumerate(specs):
        for split, stream, count in (
            (TRAIN_SPLIT, _STREAM_TRAIN, per_class_train),
            (TEST_SPLIT, _STREAM_TEST, per_class_test),
        ):
            for i in range(count):
                rng = derive_rng(seed, stream, ci, i)
                cloud = sample_shape(spec, rng)
                rel = f"clouds/{spec.family}_{split}_{i:04d}.pcb"
                write_cloud(out_dir / rel, cloud)
                source_entries.append(ManifestEntry(rel, spec.family, split))
        for i in range(per_class_target):
            rng = derive_rng(seed, _STREAM_TARGET, ci, i)
            cloud = sample_shape(spec, rng, count=TARGET_OVERSAMPLE * spec.sample_count)
            cloud = deform_target_cloud(cloud, i, rng)
            rel = f"clouds/{spec.family}_target_{i:04d}.pcb"
            write_cloud(out_dir / rel, cloud)
            target_entries.append(ManifestEntry(rel, spec.family, TEST_SPLIT))

    source = DatasetManifest(
        name="synthetic-source",
        role=SOURCE_ROLE,
        classes=classes,
        entries=tuple(source_entries),
        root=out_dir,
    )
    target = DatasetManifest(
        name="synthetic-target",
        role=TARGET_ROLE,
        classes=classes,
        entries=tuple(target_entries),
        root=out_dir,
    )
    save_manifest(out_dir / "source.json", source)
    save_manifest(out_dir / "target.json", target)
    return source, target
