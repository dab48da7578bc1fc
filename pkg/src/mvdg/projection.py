"""Orthographic depth-image rendering of point clouds.

A view is a right-handed orthonormal triad (right, up, direction): the
camera looks along `direction`, `up` points toward image row 0. A point p
lands at image coordinates a = p.r (horizontal), b = p.u (vertical) with
depth t = p.d, all expected in [-1, 1] for a normalized cloud:

    column = round((a + 1) / 2 * (R - 1))
    row    = round((1 - b) / 2 * (R - 1))      (row 0 = top)
    value  = 1 - (t_near + 1) / 2              (closer point => brighter)

Rounding is half-away-from-zero throughout, and the nearest point (minimum
t) wins when several share a pixel. Background pixels are exactly 0. Each
point covers exactly one pixel; there is no splatting kernel.

Basis convention, frozen because golden images depend on it:

    direction +z: right = (+1, 0, 0), up = (0, 1, 0)
    direction -z: right = (-1, 0, 0), up = (0, 1, 0)
    all others:   up = normalize(z_axis - d_z * direction), right = up x d

For equatorial views this puts up = +z, so world z always grows toward the
top of the image.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from .common import round_half_away_array
from .errors import CloudOutOfSlabError
from .geometry import PointCloud

ORTHOGONAL6 = "orthogonal6"
CUBE8 = "cube8"
CLOCK14 = "clock14"
CUBEPLUS14 = "cubeplus14"

VIEW_SET_KINDS = (ORTHOGONAL6, CUBE8, CLOCK14, CUBEPLUS14)

# Slack on the [-1,1] slab check, matching the normalization tolerance.
SLAB_TOL = 1e-6

_ORTHO_NAMES = ("right", "left", "front", "back", "top", "bottom")


@dataclass(frozen=True)
class ViewSet:
    """A fixed, ordered collection of views.

    directions, rights and ups are (V, 3) float64 arrays; names gives one
    filesystem-safe label per view. Construct through :func:`view_basis`.
    """

    kind: str
    directions: np.ndarray
    rights: np.ndarray
    ups: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in VIEW_SET_KINDS:
            raise ValueError(f"unknown view set kind {self.kind!r}")
        d, r, u = self.directions, self.rights, self.ups
        v = d.shape[0]
        if d.shape != (v, 3) or r.shape != (v, 3) or u.shape != (v, 3):
            raise ValueError("direction/right/up arrays must all be (V, 3)")
        if len(self.names) != v:
            raise ValueError("one name per view required")
        for i in range(v):
            for vec in (d[i], r[i], u[i]):
                if abs(np.linalg.norm(vec) - 1.0) > 1e-9:
                    raise ValueError(f"view {i}: basis vector not unit length")
            if abs(d[i] @ r[i]) > 1e-9 or abs(d[i] @ u[i]) > 1e-9 or abs(r[i] @ u[i]) > 1e-9:
                raise ValueError(f"view {i}: basis not orthogonal")
            if np.max(np.abs(np.cross(r[i], u[i]) - d[i])) > 1e-9:
                raise ValueError(f"view {i}: (right, up, direction) not right-handed")

    def __len__(self) -> int:
        return self.directions.shape[0]


def _basis_for(direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Frozen (right, up) pair for one unit direction. See module docstring."""
    z = np.array([0.0, 0.0, 1.0])
    if abs(direction[2] - 1.0) < 1e-12:
        return np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    if abs(direction[2] + 1.0) < 1e-12:
        return np.array([-1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    up = z - direction[2] * direction
    up /= np.linalg.norm(up)
    right = np.cross(up, direction)
    return right, up


def _orthogonal6_directions() -> np.ndarray:
    return np.array(
        [
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
        ]
    )


def _cube8_directions() -> tuple[np.ndarray, tuple[str, ...]]:
    dirs = []
    names = []
    for sx in (1.0, -1.0):
        for sy in (1.0, -1.0):
            for sz in (1.0, -1.0):
                dirs.append([sx, sy, sz])
                names.append(
                    "corner_"
                    + ("p" if sx > 0 else "n")
                    + "x"
                    + ("p" if sy > 0 else "n")
                    + "y"
                    + ("p" if sz > 0 else "n")
                    + "z"
                )
    return np.array(dirs) / math.sqrt(3.0), tuple(names)


def view_basis(kind: str) -> ViewSet:
    """Build the canonical view set for a kind, in its documented order.

    orthogonal6: (+x, -x, +y, -y, +z, -z), named right, left, front,
        back, top, bottom.
    cube8: the 8 cube-corner directions (+-1, +-1, +-1)/sqrt(3), sign of x
        varying slowest, z fastest.
    clock14: 12 equatorial directions at azimuths 0, 30, ..., 330 degrees
        (direction k is (cos, sin, 0) at 30k degrees), then +z and -z.
    cubeplus14: orthogonal6 followed by cube8.
    """
    if kind == ORTHOGONAL6:
        dirs = _orthogonal6_directions()
        names = _ORTHO_NAMES
    elif kind == CUBE8:
        dirs, names = _cube8_directions()
    elif kind == CLOCK14:
        azim = [
            [math.cos(k * math.pi / 6.0), math.sin(k * math.pi / 6.0), 0.0]
            for k in range(12)
        ]
        dirs = np.array(azim + [[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
        names = tuple(f"azim_{30 * k:03d}" for k in range(12)) + ("top", "bottom")
    elif kind == CUBEPLUS14:
        cube_dirs, cube_names = _cube8_directions()
        dirs = np.concatenate([_orthogonal6_directions(), cube_dirs])
        names = _ORTHO_NAMES + cube_names
    else:
        raise ValueError(f"unknown view set kind {kind!r}")

    rights = np.empty_like(dirs)
    ups = np.empty_like(dirs)
    for i in range(dirs.shape[0]):
        rights[i], ups[i] = _basis_for(dirs[i])
    return ViewSet(kind=kind, directions=dirs, rights=rights, ups=ups, names=names)


@dataclass(frozen=True)
class DepthImageStack:
    """V single-channel depth images of one cloud: (V, 1, R, R) in [0, 1]."""

    images: np.ndarray
    resolution: int
    view_set: ViewSet

    def __post_init__(self):
        v = len(self.view_set)
        r = self.resolution
        if self.images.shape != (v, 1, r, r):
            raise ValueError(
                f"expected images of shape {(v, 1, r, r)}, got {self.images.shape}"
            )
        if float(self.images.min()) < 0.0 or float(self.images.max()) > 1.0:
            raise ValueError("depth image values must lie in [0, 1]")


def project(cloud: PointCloud, views: ViewSet, resolution: int) -> DepthImageStack:
    """Render a normalized cloud into one depth image per view.

    Raises CloudOutOfSlabError if any point coordinate along any view
    basis vector leaves [-1 - 1e-6, 1 + 1e-6].
    """
    if resolution < 16:
        raise ValueError(f"resolution must be at least 16, got {resolution}")
    pts = cloud.points
    r_max = resolution - 1
    v = len(views)

    # One gemm gives every (a, b, t) coordinate for every view: columns
    # 0..V-1 are a (along right), V..2V-1 are b (along up), 2V.. are t
    # (along direction).
    basis = np.concatenate([views.rights, views.ups, views.directions], axis=0)
    coords = pts @ basis.T
    worst_per_axis = np.abs(coords).max(axis=0)
    worst_per_view = worst_per_axis.reshape(3, v).max(axis=0)
    bad = np.flatnonzero(worst_per_view > 1.0 + SLAB_TOL)
    if bad.size:
        i = int(bad[0])
        raise CloudOutOfSlabError(
            f"view {views.names[i]}: coordinate magnitude {worst_per_view[i]:.6g} "
            f"exceeds the [-1, 1] slab (is the cloud normalized?)"
        )

    a = coords[:, :v]
    b = coords[:, v : 2 * v]
    t = coords[:, 2 * v :]
    # Half-away-from-zero rounding. The pixel coordinates live in
    # [-tol/2, r_max + tol/2], and on non-negative inputs (and the sliver
    # of negatives above -0.5) floor(x + 0.5) is exactly that rule, without
    # round_half_away_array's branch-per-element cost.
    pc = (a + 1.0) / 2.0 * r_max
    pc += 0.5
    cols = np.floor(pc, out=pc).astype(np.intp)
    pr = (1.0 - b) / 2.0 * r_max
    pr += 0.5
    rows = np.floor(pr, out=pr).astype(np.intp)
    values = 1.0 - (t + 1.0) / 2.0

    # Minimum depth per pixel wins; value is strictly decreasing in depth,
    # so the per-pixel max over values is the same rule. Rasterize all
    # views in one unbuffered scatter-max over a flat (V*R*R) plane.
    lin = rows * resolution + cols
    lin += np.arange(v, dtype=np.intp) * (resolution * resolution)
    flat = np.zeros(v * resolution * resolution, dtype=np.float64)
    np.maximum.at(flat, lin.ravel(), values.ravel())
    images = flat.reshape(v, 1, resolution, resolution).astype(np.float32)

    return DepthImageStack(images=images, resolution=resolution, view_set=views)


def to_pgm_bytes(image: np.ndarray) -> bytes:
    """Encode one (R, R) or (1, R, R) image in [0, 1] as binary PGM (P5).

    Pixel bytes are round(255 * value), half away from zero.
    """
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {img.shape}")
    if float(img.min()) < 0.0 or float(img.max()) > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    h, w = img.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    body = round_half_away_array(img.astype(np.float64) * 255.0).astype(np.uint8)
    return header + body.tobytes()
