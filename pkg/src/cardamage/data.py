"""Corpus layout, stratified splitting and rotation/flip augmentation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .ppm import read_image, write_image
from .tensor import Prng, bilinear_resize

CLASS_NAMES = (
    "guard_gouge",
    "entryway_imprint",
    "glass_break",
    "head_light_broken",
    "tail_light_broken",
    "scratch",
    "crush",
    "no_damage",
)
NO_DAMAGE = CLASS_NAMES.index("no_damage")

# Per-class train, augmented-train and test sizes of the original corpus.
TABLE_I_TRAIN = (172, 145, 205, 192, 77, 186, 192, 1282)
TABLE_I_AUGMENTED = (1254, 825, 1270, 1172, 484, 1116, 1094, 7525)
TABLE_I_TEST = (47, 38, 52, 46, 23, 46, 44, 320)

MANIFEST = "manifest.tsv"
UNASSIGNED = "none"


@dataclass
class LabeledImage:
    pixels: np.ndarray
    label: int
    source_id: str
    bbox: tuple | None = None  # (x, y, w, h) of the planted damage, synthetic data only

    def __post_init__(self):
        if not 0 <= self.label < len(CLASS_NAMES):
            raise ValueError(f"label {self.label} outside [0, {len(CLASS_NAMES)})")


@dataclass
class Entry:
    id: str
    label: int
    split: str = UNASSIGNED


@dataclass
class DatasetManifest:
    """Directory-backed corpus: ``<root>/<class-name>/<id>.ppm`` plus ``manifest.tsv``."""

    entries: list[Entry]
    root: Path | None = None
    class_names: tuple = CLASS_NAMES

    def path(self, entry: Entry) -> Path:
        return Path(self.root) / self.class_names[entry.label] / f"{entry.id}.ppm"

    def by_class(self) -> dict[int, list[Entry]]:
        groups: dict[int, list[Entry]] = {k: [] for k in range(len(self.class_names))}
        for e in self.entries:
            groups[e.label].append(e)
        return groups

    def counts(self, split: str | None = None) -> list[int]:
        out = [0] * len(self.class_names)
        for e in self.entries:
            if split is None or e.split == split:
                out[e.label] += 1
        return out

    def select(self, split: str | None) -> list[Entry]:
        return [e for e in self.entries if split is None or e.split == split]

    def write(self, root=None) -> Path:
        root = Path(root if root is not None else self.root)
        root.mkdir(parents=True, exist_ok=True)
        path = root / MANIFEST
        with open(path, "w", newline="") as f:
            w = csv.writer(f, delimiter="\t", lineterminator="\n")
            w.writerow(["id", "class", "split"])
            for e in self.entries:
                w.writerow([e.id, self.class_names[e.label], e.split])
        return path

    @classmethod
    def read(cls, root) -> "DatasetManifest":
        root = Path(root)
        index = {name: i for i, name in enumerate(CLASS_NAMES)}
        entries = []
        with open(root / MANIFEST, newline="") as f:
            rows = csv.reader(f, delimiter="\t")
            header = next(rows)
            if header[:3] != ["id", "class", "split"]:
                raise ValueError(f"{root / MANIFEST}: unexpected header {header}")
            for row in rows:
                if row[1] not in index:
                    raise ValueError(f"unknown class {row[1]!r} in manifest")
                entries.append(Entry(row[0], index[row[1]], row[2]))
        return cls(entries, root)

    def load(self, split: str | None = None, channels: int = 3, size: int | None = None):
        """Images of ``split`` as ``(x, y, ids)``, optionally resized to ``size x size``."""
        sel = self.select(split)
        xs = []
        for e in sel:
            img = read_image(self.path(e), channels)
            if size is not None and img.shape[:2] != (size, size):
                img = bilinear_resize(img, size, size)
            xs.append(img)
        x = np.stack(xs) if xs else np.zeros((0, size or 0, size or 0, channels))
        y = np.array([e.label for e in sel], dtype=np.int64)
        return x, y, [e.id for e in sel]

    def images(self, split: str | None = None, channels: int = 3) -> list[LabeledImage]:
        return [LabeledImage(read_image(self.path(e), channels), e.label, e.id)
                for e in self.select(split)]


def stratified_split(manifest: DatasetManifest, train_frac: float = 0.8, seed: int = 0):
    """Per-class shuffled split; ``floor(n * train_frac)`` of each class goes to train.

    Returns ``(train, test)`` entry lists with their ``split`` fields set.
    """
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac must be in (0, 1), got {train_frac}")
    train, test = [], []
    for label, group in manifest.by_class().items():
        if not group:
            continue
        if len(group) < 2:
            raise ValueError(f"class {manifest.class_names[label]} has fewer than 2 images")
        group = sorted(group, key=lambda e: e.id)
        order = Prng.derive(seed, f"split/{manifest.class_names[label]}").permutation(len(group))
        n_train = math.floor(len(group) * train_frac)
        for rank, j in enumerate(order):
            if rank < n_train:
                train.append(replace(group[j], split="train"))
            else:
                test.append(replace(group[j], split="test"))
    key = lambda e: (e.label, e.id)  # noqa: E731
    return sorted(train, key=key), sorted(test, key=key)


def apply_split(manifest: DatasetManifest, train_frac: float = 0.8, seed: int = 0) -> DatasetManifest:
    train, test = stratified_split(manifest, train_frac, seed)
    assigned = {e.id: e.split for e in train + test}
    entries = [replace(e, split=assigned[e.id]) for e in manifest.entries]
    return replace(manifest, entries=entries)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentSpec:
    rotation: tuple = (-20.0, 20.0)
    flip_prob: float = 0.5
    target_counts: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.rotation
        if lo > hi:
            raise ValueError(f"rotation bounds out of order: {self.rotation}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must be in [0, 1]")


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise about the image center.

    Inverse-mapped bilinear sampling; source coordinates outside the image
    are clamped to the border (edge replication).
    """
    h, w = img.shape[:2]
    t = math.radians(degrees)
    cos, sin = math.cos(t), math.sin(t)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy = np.arange(h)[:, None] - cy
    dx = np.arange(w)[None, :] - cx
    sy = np.clip(cy + sin * dx + cos * dy, 0, h - 1)
    sx = np.clip(cx + cos * dx - sin * dy, 0, w - 1)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[..., None]
    fx = (sx - x0)[..., None]
    top = img[y0, x0] + (img[y0, x1] - img[y0, x0]) * fx
    bot = img[y1, x0] + (img[y1, x1] - img[y1, x0]) * fx
    return top + (bot - top) * fy


def augment_one(img: LabeledImage, spec: AugmentSpec, prng: Prng, suffix: str = "aug") -> LabeledImage:
    lo, hi = spec.rotation
    theta = prng.uniform(lo, hi)
    flip = prng.random() < spec.flip_prob
    px = rotate(img.pixels, theta) if theta != 0.0 else img.pixels.copy()
    if flip:
        px = hflip(px)
    return LabeledImage(px, img.label, f"{img.source_id}_{suffix}")


def _targets(spec: AugmentSpec, num_classes: int) -> list[int]:
    t = spec.target_counts
    if t is None:
        raise ValueError("augment_to_counts needs target_counts")
    if isinstance(t, dict):
        return [int(t.get(k, t.get(CLASS_NAMES[k], 0))) for k in range(num_classes)]
    if len(t) != num_classes:
        raise ValueError(f"{len(t)} target counts for {num_classes} classes")
    return [int(v) for v in t]


def iter_augment_to_counts(images: Iterable[LabeledImage], spec: AugmentSpec,
                           num_classes: int = len(CLASS_NAMES)) -> Iterator[LabeledImage]:
    """Originals first, then round-robin augmented copies up to the target counts.

    Within a class, originals are taken in source-id order, so the output
    does not depend on input order. Copy ``k`` augments original ``k mod n``;
    each copy draws from its own stream keyed by source id and copy number.
    """
    groups: dict[int, list[LabeledImage]] = {k: [] for k in range(num_classes)}
    for im in images:
        groups[im.label].append(im)
    for k in groups:
        groups[k].sort(key=lambda im: im.source_id)
    targets = _targets(spec, num_classes)
    for k in range(num_classes):
        if targets[k] < len(groups[k]):
            raise ValueError(
                f"target {targets[k]} below original count {len(groups[k])} for class {CLASS_NAMES[k]}")
        if targets[k] > len(groups[k]) == 0:
            raise ValueError(f"class {CLASS_NAMES[k]} has no images to augment")
    for k in range(num_classes):
        yield from groups[k]
    for k in range(num_classes):
        originals = groups[k]
        n = len(originals)
        for copy in range(targets[k] - n):
            src = originals[copy % n]
            rnd = copy // n
            prng = Prng.derive(spec.seed, f"augment/{src.source_id}/{rnd}")
            yield augment_one(src, spec, prng, suffix=f"aug{rnd}")


def augment_to_counts(images: Iterable[LabeledImage], spec: AugmentSpec,
                      num_classes: int = len(CLASS_NAMES)) -> list[LabeledImage]:
    return list(iter_augment_to_counts(images, spec, num_classes))


def write_corpus(images: Iterable[LabeledImage], root, split: str = UNASSIGNED) -> DatasetManifest:
    root = Path(root)
    for name in CLASS_NAMES:
        (root / name).mkdir(parents=True, exist_ok=True)
    entries = []
    for im in images:
        write_image(root / CLASS_NAMES[im.label] / f"{im.source_id}.ppm", im.pixels)
        entries.append(Entry(im.source_id, im.label, split))
    manifest = DatasetManifest(entries, root)
    manifest.write()
    return manifest
