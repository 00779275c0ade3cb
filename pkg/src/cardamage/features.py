"""Feature-vector files produced by (stand-ins for) pretrained extractors.

Binary layout, little-endian::

    b"FEAT"  u32 version  u32 N  u32 D  u32 K
    N*D f64 feature matrix (row-major)
    N u16 labels

The extractor name lives in a sidecar ``<file>.json``. A CSV form with
header ``label,f0,...,f{D-1}`` is also accepted.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"FEAT"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class FeatureFormatError(ValueError):
    pass


@dataclass
class FeatureSet:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    extractor: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise FeatureFormatError(f"features must be N x D, got {self.features.shape}")
        if len(self.features) != len(self.labels):
            raise FeatureFormatError(
                f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if not np.all(np.isfinite(self.features)):
            raise FeatureFormatError("non-finite feature values")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FeatureFormatError(f"labels outside [0, {self.num_classes})")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return len(self.labels)


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def to_bytes(fs: FeatureSet) -> bytes:
    n, d = fs.features.shape
    return (
        _HEADER.pack(MAGIC, VERSION, n, d, fs.num_classes)
        + np.ascontiguousarray(fs.features, dtype="<f8").tobytes()
        + fs.labels.astype("<u2").tobytes()
    )


def from_bytes(data: bytes, extractor: str = "") -> FeatureSet:
    if len(data) < _HEADER.size:
        raise FeatureFormatError("truncated header")
    magic, version, n, d, k = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FeatureFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FeatureFormatError(f"unsupported version {version}")
    if n == 0:
        raise FeatureFormatError("empty feature set")
    need = _HEADER.size + 8 * n * d + 2 * n
    if len(data) != need:
        raise FeatureFormatError(f"expected {need} bytes for N={n}, D={d}; got {len(data)}")
    off = _HEADER.size
    feats = np.frombuffer(data, dtype="<f8", count=n * d, offset=off).reshape(n, d).astype(np.float64)
    labels = np.frombuffer(data, dtype="<u2", count=n, offset=off + 8 * n * d).astype(np.int64)
    return FeatureSet(feats, labels, k, extractor)


def write_feature_file(fs: FeatureSet, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["label"] + [f"f{j}" for j in range(fs.dim)])
            for lab, row in zip(fs.labels, fs.features):
                w.writerow([int(lab)] + [repr(float(v)) for v in row])
    else:
        path.write_bytes(to_bytes(fs))
    _sidecar(path).write_text(
        json.dumps({"extractor": fs.extractor, "num_classes": fs.num_classes}, sort_keys=True) + "\n")


def read_feature_file(path, num_classes: int | None = None) -> FeatureSet:
    path = Path(path)
    meta = {}
    if _sidecar(path).exists():
        meta = json.loads(_sidecar(path).read_text())
    extractor = meta.get("extractor", path.stem)
    if path.suffix.lower() == ".csv":
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        if not rows or rows[0][:1] != ["label"]:
            raise FeatureFormatError("CSV header must start with 'label'")
        d = len(rows[0]) - 1
        if rows[0][1:] != [f"f{j}" for j in range(d)]:
            raise FeatureFormatError("CSV header must be label,f0,...,f{D-1}")
        body = rows[1:]
        if not body:
            raise FeatureFormatError("empty feature set")
        if any(len(r) != d + 1 for r in body):
            raise FeatureFormatError("CSV rows must all have D+1 fields")
        labels = np.array([int(r[0]) for r in body])
        feats = np.array([[float(v) for v in r[1:]] for r in body])
        k = num_classes or meta.get("num_classes") or int(labels.max()) + 1
        return FeatureSet(feats, labels, k, extractor)
    fs = from_bytes(path.read_bytes(), extractor)
    if num_classes is not None and num_classes != fs.num_classes:
        raise FeatureFormatError(f"file has K={fs.num_classes}, expected {num_classes}")
    return fs
