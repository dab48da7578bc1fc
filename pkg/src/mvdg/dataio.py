"""File formats: point clouds, raw tensors, dataset manifests, checkpoints.

All binary formats are little-endian and deliberately small enough to
re-implement from this docstring:

  cloud (.pcb)   "PCDG", version u16=1, count u32, then count*3 float32.
  tensor (.tnsr) "TNSR", version u16=1, rank u16 (>=1), rank u32 dims,
                 then row-major float32 payload. The dims product must
                 fit in a u32.
  checkpoint     "MVDGCKPT", version u16=1, header length u32, UTF-8
                 JSON header {config, extra, tensors: [{name, rank,
                 dims, offset}]}, then concatenated float32 payloads.
                 Offsets are bytes relative to the end of the header.

Text clouds (.xyz) hold one point per line: three floats printed to 9
significant digits, single spaces, LF endings. Manifests are JSON files
listing class names and (path, class, split) entries; paths are relative
to the manifest's directory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    BadRankError,
    ParseError,
    SizeOverflowError,
    TruncatedFileError,
)
from .geometry import PointCloud

CLOUD_MAGIC = b"PCDG"
TENSOR_MAGIC = b"TNSR"
CHECKPOINT_MAGIC = b"MVDGCKPT"
U32_MAX = 0xFFFFFFFF

SOURCE_ROLE = "source"
TARGET_ROLE = "target"
TRAIN_SPLIT = "train"
TEST_SPLIT = "test"


# ---------------------------------------------------------------------------
# point clouds


def write_cloud(path, cloud: PointCloud, fmt: str | None = None):
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    if fmt == "xyz":
        lines = [
            f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in cloud.points
        ]
        path.write_text("".join(lines), encoding="ascii", newline="")
    elif fmt == "pcb":
        payload = np.ascontiguousarray(cloud.points, dtype="<f4")
        header = CLOUD_MAGIC + struct.pack("<HI", 1, len(cloud))
        path.write_bytes(header + payload.tobytes())
    else:
        raise ValueError(f"unknown cloud format {fmt!r} (expected xyz or pcb)")


def read_cloud(path, fmt: str | None = None) -> PointCloud:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    if fmt == "xyz":
        return _read_xyz(path)
    if fmt == "pcb":
        return _read_pcb(path)
    raise ValueError(f"unknown cloud format {fmt!r} (expected xyz or pcb)")


def _read_xyz(path: Path) -> PointCloud:
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="ascii").splitlines(), 1):
        fields = line.split()
        if len(fields) != 3:
            raise ParseError(f"{path}: line {lineno}: expected 3 values, got {len(fields)}")
        try:
            rows.append([float(v) for v in fields])
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from None
    return PointCloud(np.array(rows, dtype=np.float64).reshape(len(rows), 3))


def _read_pcb(path: Path) -> PointCloud:
    data = path.read_bytes()
    if len(data) < 4:
        raise TruncatedFileError(f"{path}: file ends inside the magic at byte {len(data)}")
    if data[:4] != CLOUD_MAGIC:
        raise BadMagicError(f"{path}: expected magic {CLOUD_MAGIC!r}, found {data[:4]!r}")
    if len(data) < 10:
        raise TruncatedFileError(f"{path}: file ends inside the header at byte {len(data)}")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != 1:
        raise ParseError(f"{path}: unsupported cloud format version {version}")
    expected = 10 + 12 * count
    if len(data) < expected:
        raise TruncatedFileError(
            f"{path}: payload of {count} points needs {expected} bytes, "
            f"file ends at byte {len(data)}"
        )
    if len(data) > expected:
        raise ParseError(f"{path}: {len(data) - expected} trailing bytes after payload")
    pts = np.frombuffer(data, dtype="<f4", count=3 * count, offset=10)
    return PointCloud(pts.reshape(count, 3).astype(np.float64))


# ---------------------------------------------------------------------------
# raw tensors


def write_tensor(path, array: np.ndarray):
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim == 0:
        raise BadRankError("raw tensor files require rank >= 1")
    if arr.size > U32_MAX:
        raise SizeOverflowError(f"tensor of {arr.size} elements exceeds the u32 limit")
    header = TENSOR_MAGIC + struct.pack("<HH", 1, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 4:
        raise TruncatedFileError(f"{path}: file ends inside the magic at byte {len(data)}")
    if data[:4] != TENSOR_MAGIC:
        raise BadMagicError(f"{path}: expected magic {TENSOR_MAGIC!r}, found {data[:4]!r}")
    if len(data) < 8:
        raise TruncatedFileError(f"{path}: file ends inside the header at byte {len(data)}")
    version, rank = struct.unpack_from("<HH", data, 4)
    if version != 1:
        raise ParseError(f"{path}: unsupported tensor format version {version}")
    if rank == 0:
        raise BadRankError(f"{path}: rank 0 tensors are not representable")
    dims_end = 8 + 4 * rank
    if len(data) < dims_end:
        raise TruncatedFileError(f"{path}: file ends inside the dims at byte {len(data)}")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    total = 1
    for d in dims:
        total *= d
    if total > U32_MAX:
        raise SizeOverflowError(f"{path}: dims {dims} multiply past the u32 limit")
    expected = dims_end + 4 * total
    if len(data) < expected:
        raise TruncatedFileError(
            f"{path}: payload needs {expected} bytes, file ends at byte {len(data)}"
        )
    if len(data) > expected:
        raise ParseError(f"{path}: {len(data) - expected} trailing bytes after payload")
    return np.frombuffer(data, dtype="<f4", count=total, offset=dims_end).reshape(dims).copy()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, config: dict, tensors: dict, extra: dict | None = None):
    """Write a versioned checkpoint: JSON header plus float32 payloads.

    config and extra must be JSON-serializable; tensors maps names to
    arrays (saved as float32). Iteration order of `tensors` fixes the
    payload layout, so identical inputs give identical bytes.
    """
    payloads = []
    directory = []
    offset = 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        directory.append(
            {"name": name, "rank": arr.ndim, "dims": list(arr.shape), "offset": offset}
        )
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    header = {"config": config, "extra": extra or {}, "tensors": directory}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = CHECKPOINT_MAGIC + struct.pack("<HI", 1, len(hb)) + hb + b"".join(payloads)
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> tuple[dict, dict, dict]:
    """Read a checkpoint; returns (config, tensors, extra)."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 8:
        raise TruncatedFileError(f"{path}: file ends inside the magic at byte {len(data)}")
    if data[:8] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: expected magic {CHECKPOINT_MAGIC!r}, found {data[:8]!r}")
    if len(data) < 14:
        raise TruncatedFileError(f"{path}: file ends inside the header at byte {len(data)}")
    version, header_len = struct.unpack_from("<HI", data, 8)
    if version != 1:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    body = 14 + header_len
    if len(data) < body:
        raise TruncatedFileError(f"{path}: header of {header_len} bytes is cut short")
    try:
        header = json.loads(data[14:body].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: bad header JSON: {exc}") from None
    for key in ("config", "extra", "tensors"):
        if key not in header:
            raise ParseError(f"{path}: header is missing the {key!r} field")
    tensors = {}
    for entry in header["tensors"]:
        dims = tuple(entry["dims"])
        total = 1
        for d in dims:
            total *= d
        start = body + entry["offset"]
        end = start + 4 * total
        if end > len(data):
            raise TruncatedFileError(
                f"{path}: tensor {entry['name']!r} needs bytes up to {end}, "
                f"file ends at byte {len(data)}"
            )
        tensors[entry["name"]] = (
            np.frombuffer(data, dtype="<f4", count=total, offset=start).reshape(dims).copy()
        )
    return header["config"], tensors, header["extra"]


def first_config_difference(expected, found, prefix: str = "") -> str | None:
    """Dotted path of the first differing field, or None if equal.

    Both sides should be JSON-shaped (dicts, lists, scalars); keys are
    compared in sorted order so the answer is deterministic.
    """
    if isinstance(expected, dict) and isinstance(found, dict):
        for key in sorted(set(expected) | set(found)):
            inner = f"{prefix}.{key}" if prefix else str(key)
            if key not in expected or key not in found:
                return inner
            diff = first_config_difference(expected[key], found[key], inner)
            if diff is not None:
                return diff
        return None
    if isinstance(expected, list) and isinstance(found, list):
        if len(expected) != len(found):
            return f"{prefix}.length" if prefix else "length"
        for i, (e, f) in enumerate(zip(expected, found)):
            diff = first_config_difference(e, f, f"{prefix}[{i}]")
            if diff is not None:
                return diff
        return None
    if expected != found:
        return prefix or "(root)"
    return None


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    class_name: str
    split: str

    def __post_init__(self):
        if self.split not in (TRAIN_SPLIT, TEST_SPLIT):
            raise ParseError(f"entry {self.path!r}: bad split {self.split!r}")


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    role: str
    classes: tuple[str, ...]
    entries: tuple[ManifestEntry, ...]
    root: Path | None = None

    def __post_init__(self):
        if self.role not in (SOURCE_ROLE, TARGET_ROLE):
            raise ParseError(f"manifest {self.name!r}: bad role {self.role!r}")
        if not self.classes:
            raise ParseError(f"manifest {self.name!r}: empty class list")
        if len(set(self.classes)) != len(self.classes):
            raise ParseError(f"manifest {self.name!r}: duplicate class names")
        known = set(self.classes)
        for e in self.entries:
            if e.class_name not in known:
                raise ParseError(
                    f"manifest {self.name!r}: entry {e.path!r} names unknown "
                    f"class {e.class_name!r}"
                )

    def class_id(self, name: str) -> int:
        return self.classes.index(name)

    def split_entries(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]


def save_manifest(path, manifest: DatasetManifest):
    doc = {
        "name": manifest.name,
        "role": manifest.role,
        "classes": list(manifest.classes),
        "entries": [
            {"path": e.path, "class": e.class_name, "split": e.split}
            for e in manifest.entries
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: bad manifest JSON: {exc}") from None
    try:
        entries = tuple(
            ManifestEntry(e["path"], e["class"], e["split"]) for e in doc["entries"]
        )
        return DatasetManifest(
            name=doc["name"],
            role=doc["role"],
            classes=tuple(doc["classes"]),
            entries=entries,
            root=path.parent,
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: malformed manifest: {exc!r}") from None


@dataclass
class LoadedDataset:
    """A materialized split: clouds, integer labels, stable sample ids."""

    clouds: list[PointCloud]
    labels: np.ndarray
    ids: list[str]
    classes: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.clouds)


def load_split(manifest: DatasetManifest, split: str) -> LoadedDataset:
    if manifest.root is None:
        raise ValueError("manifest has no root directory; load it from disk first")
    clouds = []
    labels = []
    ids = []
    for e in manifest.split_entries(split):
        clouds.append(read_cloud(manifest.root / e.path))
        labels.append(manifest.class_id(e.class_name))
        ids.append(e.path)
    return LoadedDataset(
        clouds=clouds,
        labels=np.array(labels, dtype=np.int64),
        ids=ids,
        classes=manifest.classes,
    )
