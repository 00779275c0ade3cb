"""Procedural stand-in for the car-damage photo corpus.

Each image is a painted "panel" (random paint color, lighting gradient,
low-frequency blotches and fine grain) with one class-specific overlay.
Overlay geometry scales with the image size, and the overlay mask and its
bounding box are kept as localization ground truth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import CLASS_NAMES, NO_DAMAGE, DatasetManifest, Entry, LabeledImage, UNASSIGNED
from .ppm import write_image
from .tensor import Prng, bilinear_resize

BOXES = "boxes.tsv"


@dataclass
class SynthImage:
    image: LabeledImage
    mask: np.ndarray  # H x W bool, empty for no_damage


def _panel(size: int, rng: Prng) -> np.ndarray:
    base = rng.uniform(0.25, 0.8, 3)
    light = rng.uniform(-0.12, 0.12)
    ramp = np.linspace(-1.0, 1.0, size)[:, None, None] * light
    blotch = bilinear_resize(rng.normal((4, 4, 1), scale=0.04), size, size)
    grain = rng.normal((size, size, 1), scale=0.015)
    return np.clip(base[None, None, :] + ramp + blotch + grain, 0.0, 1.0)


def _grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size]
    return yy.astype(np.float64), xx.astype(np.float64)


def _segment_dist(yy, xx, p, q):
    (y0, x0), (y1, x1) = p, q
    vy, vx = y1 - y0, x1 - x0
    ll = vy * vy + vx * vx
    t = np.clip(((yy - y0) * vy + (xx - x0) * vx) / ll, 0.0, 1.0) if ll > 0 else 0.0
    return np.hypot(yy - (y0 + t * vy), xx - (x0 + t * vx))


def _polyline(yy, xx, points, half_width):
    mask = np.zeros(yy.shape, dtype=bool)
    for p, q in zip(points[:-1], points[1:]):
        mask |= _segment_dist(yy, xx, p, q) <= half_width
    return mask


def _dent(img, yy, xx, cy, cx, ry, rx):
    r2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    mask = r2 <= 1.0
    shade = np.where(mask, 0.3 + 0.35 * r2, 1.0)[..., None]
    img *= shade
    return mask


def _lamp(img, yy, xx, cy, cx, h, w, rim, rng: Prng, size):
    y0, y1 = cy - h / 2, cy + h / 2
    x0, x1 = cx - w / 2, cx + w / 2
    outer = (yy >= y0) & (yy <= y1) & (xx >= x0) & (xx <= x1)
    t = max(1.0, size / 40)
    inner = (yy >= y0 + t) & (yy <= y1 - t) & (xx >= x0 + t) & (xx <= x1 - t)
    img[outer] = rim
    hole = 0.06 + rng.normal(inner.shape, scale=0.03)
    img[inner] = np.clip(hole[inner], 0.0, 1.0)[:, None]
    return outer


def synth_image(label: int, size: int, rng: Prng) -> tuple[np.ndarray, np.ndarray]:
    """One ``size x size x 3`` image of class ``label`` and its damage mask."""
    if size < 32:
        raise ValueError("synthetic images must be at least 32x32")
    img = _panel(size, rng)
    yy, xx = _grid(size)
    s = float(size)
    hw = max(0.6, s / 96)
    name = CLASS_NAMES[label]
    if name == "guard_gouge":
        mask = _dent(img, yy, xx, rng.uniform(0.66, 0.76) * s, rng.uniform(0.35, 0.65) * s,
                     rng.uniform(0.13, 0.17) * s, rng.uniform(0.24, 0.3) * s)
    elif name == "entryway_imprint":
        mask = _dent(img, yy, xx, rng.uniform(0.3, 0.42) * s, rng.uniform(0.35, 0.65) * s,
                     rng.uniform(0.2, 0.25) * s, rng.uniform(0.17, 0.21) * s)
    elif name == "glass_break":
        cy, cx = rng.uniform(0.35, 0.65, 2) * s
        n_rays = 7 + rng.integers(5)
        angles = (np.arange(n_rays) + rng.uniform(0, 1, n_rays) * 0.6) * (2 * np.pi / n_rays)
        lengths = rng.uniform(0.2, 0.28, n_rays) * s
        mask = np.zeros(yy.shape, dtype=bool)
        for a, ln in zip(angles, lengths):
            mask |= _polyline(yy, xx, [(cy, cx), (cy + ln * np.sin(a), cx + ln * np.cos(a))], hw)
        ring = 0.55 * lengths.min()
        pts = [(cy + ring * np.sin(a), cx + ring * np.cos(a)) for a in np.append(angles, angles[0])]
        mask |= _polyline(yy, xx, pts, hw)
        img[mask] = 0.95
    elif name in ("head_light_broken", "tail_light_broken"):
        left = name == "head_light_broken"
        cx = rng.uniform(0.26, 0.3) * s if left else rng.uniform(0.7, 0.74) * s
        rim = np.array([0.95, 0.9, 0.4]) if left else np.array([0.85, 0.1, 0.1])
        mask = _lamp(img, yy, xx, rng.uniform(0.4, 0.6) * s, cx, rng.uniform(0.26, 0.32) * s,
                     rng.uniform(0.34, 0.4) * s, rim, rng, size)
    elif name == "scratch":
        n_pts = 3 + rng.integers(2)
        y0, x0 = rng.uniform(0.2, 0.35) * s, rng.uniform(0.15, 0.3) * s
        y1, x1 = rng.uniform(0.6, 0.8) * s, rng.uniform(0.7, 0.85) * s
        if rng.random() < 0.5:
            y0, y1 = y1, y0
        t = np.linspace(0.0, 1.0, n_pts)
        jitter = rng.uniform(-0.05, 0.05, (2, n_pts)) * s
        jitter[:, 0] = jitter[:, -1] = 0.0
        pts = list(zip(y0 + t * (y1 - y0) + jitter[0], x0 + t * (x1 - x0) + jitter[1]))
        mask = _polyline(yy, xx, pts, hw)
        img[mask] = 0.92
    elif name == "crush":
        cy, cx = rng.uniform(0.35, 0.65, 2) * s
        h, w = rng.uniform(0.38, 0.46, 2) * s
        mask = (np.abs(yy - cy) <= h / 2) & (np.abs(xx - cx) <= w / 2)
        noise = bilinear_resize(rng.normal((size // 4, size // 4, 1), scale=0.3), size, size)
        noise += rng.normal((size, size, 1), scale=0.12)
        img[mask] = np.clip(img[mask] * 0.6 + noise[mask], 0.0, 1.0)
    else:
        mask = np.zeros(yy.shape, dtype=bool)
    return np.clip(img, 0.0, 1.0), mask


def mask_bbox(mask: np.ndarray):
    """Tight ``(x, y, w, h)`` box of a boolean mask, or None when empty."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    return (int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))


def make_image(label: int, size: int, seed: int, source_id: str) -> SynthImage:
    rng = Prng.derive(seed, f"synth/{source_id}")
    px, mask = synth_image(label, size, rng)
    return SynthImage(LabeledImage(px, label, source_id, mask_bbox(mask)), mask)


def synth_dataset(n_per_class: int, size: int = 64, seed: int = 0,
                  classes=range(len(CLASS_NAMES))) -> list[SynthImage]:
    """``n_per_class`` images for each class, ids ``<class>_<index>``."""
    out = []
    for label in classes:
        for i in range(n_per_class):
            out.append(make_image(label, size, seed, f"{CLASS_NAMES[label]}_{i:05d}"))
    return out


def synth_unlabeled(n: int, size: int = 64, seed: int = 0) -> np.ndarray:
    """Unlabeled panel images with random damage, for autoencoder pretraining."""
    pick = Prng.derive(seed, "unlabeled/classes")
    labels = pick.integers(len(CLASS_NAMES), n)
    return np.stack([make_image(int(k), size, seed, f"unlabeled_{i:05d}").image.pixels
                     for i, k in enumerate(labels)])


def as_arrays(items: list[SynthImage]):
    x = np.stack([it.image.pixels for it in items])
    y = np.array([it.image.label for it in items], dtype=np.int64)
    return x, y


def write_synth(items: list[SynthImage], root) -> DatasetManifest:
    """Write images, ``manifest.tsv`` and ground-truth ``boxes.tsv`` under ``root``."""
    root = Path(root)
    for name in CLASS_NAMES:
        (root / name).mkdir(parents=True, exist_ok=True)
    entries = []
    with open(root / BOXES, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "class", "x", "y", "w", "h"])
        for it in items:
            im = it.image
            write_image(root / CLASS_NAMES[im.label] / f"{im.source_id}.ppm", im.pixels)
            entries.append(Entry(im.source_id, im.label, UNASSIGNED))
            if im.label != NO_DAMAGE:
                w.writerow([im.source_id, CLASS_NAMES[im.label], *im.bbox])
    manifest = DatasetManifest(entries, root)
    manifest.write()
    return manifest


def read_boxes(root) -> dict[str, tuple]:
    with open(Path(root) / BOXES, newline="") as f:
        rows = csv.DictReader(f, delimiter="\t")
        return {r["id"]: (int(r["x"]), int(r["y"]), int(r["w"]), int(r["h"])) for r in rows}
