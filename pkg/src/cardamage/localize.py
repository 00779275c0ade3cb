"""Sliding-window damage localization.

Every grid point is the center of a ``window x window`` crop (shifted inward
at the image border), which is resized to the classifier's input size and
classified. The grid tiles the image at ``stride`` pixels: grid cell
``(i, j)`` owns the pixel tile ``[i*stride, (i+1)*stride) x [j*stride, (j+1)*stride)``
and its crop is centered on that tile's middle pixel, so ``stride=1`` scores
every pixel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import CLASS_NAMES, NO_DAMAGE
from .tensor import bilinear_resize

DAMAGE_CLASSES = tuple(k for k in range(len(CLASS_NAMES)) if k != NO_DAMAGE)

# glass break red, crush blue, scratch green; the rest are free choices
PALETTE = {
    CLASS_NAMES.index("glass_break"): (1.0, 0.0, 0.0),
    CLASS_NAMES.index("crush"): (0.0, 0.0, 1.0),
    CLASS_NAMES.index("scratch"): (0.0, 1.0, 0.0),
    CLASS_NAMES.index("guard_gouge"): (0.0, 1.0, 1.0),
    CLASS_NAMES.index("entryway_imprint"): (1.0, 0.5, 0.0),
    CLASS_NAMES.index("head_light_broken"): (1.0, 1.0, 0.0),
    CLASS_NAMES.index("tail_light_broken"): (1.0, 0.0, 1.0),
    NO_DAMAGE: (1.0, 1.0, 1.0),
}


@dataclass
class LocalizeConfig:
    window: int = 100
    resize_to: int = 224
    stride: int = 10
    threshold: float = 0.9
    classes: tuple = DAMAGE_CLASSES
    footprint: str = "cell"  # region extent: "cell" tiles or whole "window" crops
    batch_size: int = 64

    def __post_init__(self):
        if self.window < 1 or self.resize_to < 1 or self.stride < 1:
            raise ValueError("window, resize_to and stride must be positive")
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"threshold must be in (0, 1], got {self.threshold}")
        if self.footprint not in ("cell", "window"):
            raise ValueError(f"footprint must be 'cell' or 'window', got {self.footprint!r}")
        self.classes = tuple(int(k) for k in self.classes)


@dataclass
class Heatmap:
    """Per-class probabilities ``K x rows x cols`` plus grid geometry."""

    probs: np.ndarray
    centers_y: np.ndarray
    centers_x: np.ndarray
    image_shape: tuple
    window: int
    stride: int
    resize_to: int

    @property
    def grid_shape(self) -> tuple:
        return self.probs.shape[1:]

    def tile(self, i: int, j: int) -> tuple:
        """Pixel tile ``(x, y, w, h)`` owned by grid cell ``(i, j)``."""
        h, w = self.image_shape[:2]
        y0, x0 = i * self.stride, j * self.stride
        return x0, y0, min(self.stride, w - x0), min(self.stride, h - y0)

    def crop(self, i: int, j: int) -> tuple:
        """Crop rectangle ``(x, y, w, h)`` classified for grid cell ``(i, j)``."""
        y0 = _crop_start(int(self.centers_y[i]), self.window, self.image_shape[0])
        x0 = _crop_start(int(self.centers_x[j]), self.window, self.image_shape[1])
        return x0, y0, self.window, self.window

    def to_dict(self) -> dict:
        return {
            "image": {"height": self.image_shape[0], "width": self.image_shape[1]},
            "window": self.window,
            "stride": self.stride,
            "resize_to": self.resize_to,
            "grid": {
                "rows": int(self.grid_shape[0]),
                "cols": int(self.grid_shape[1]),
                "centers_y": self.centers_y.tolist(),
                "centers_x": self.centers_x.tolist(),
            },
            "classes": {CLASS_NAMES[k]: self.probs[k].tolist() for k in range(len(self.probs))},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True) + "\n"


@dataclass
class Region:
    x: int
    y: int
    w: int
    h: int
    label: int
    score: float
    cells: int = 1

    @property
    def bbox(self) -> tuple:
        return (self.x, self.y, self.w, self.h)

    def to_dict(self) -> dict:
        return {"class": CLASS_NAMES[self.label], "label": self.label, "x": self.x, "y": self.y,
                "w": self.w, "h": self.h, "score": self.score, "cells": self.cells}


def _crop_start(center: int, window: int, size: int) -> int:
    return int(np.clip(center - window // 2, 0, size - window))


def grid_centers(size: int, stride: int) -> np.ndarray:
    starts = np.arange(0, size, stride)
    ends = np.minimum(starts + stride, size)
    return starts + (ends - starts - 1) // 2


def _classify(classifier, batch: np.ndarray) -> np.ndarray:
    fn = getattr(classifier, "predict_proba", classifier)
    return np.asarray(fn(batch), dtype=np.float64)


def sliding_window_map(image: np.ndarray, classifier, config: LocalizeConfig = LocalizeConfig()) -> Heatmap:
    """Classify the resized crop at every grid point of ``image`` (``H x W x C``)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w = image.shape[:2]
    if h < config.window or w < config.window:
        raise ValueError(f"image {h}x{w} smaller than window {config.window}")
    cy = grid_centers(h, config.stride)
    cx = grid_centers(w, config.stride)
    ys = [_crop_start(int(c), config.window, h) for c in cy]
    xs = [_crop_start(int(c), config.window, w) for c in cx]
    cells = [(i, j) for i in range(len(cy)) for j in range(len(cx))]
    probs = None
    win, r = config.window, config.resize_to
    for s in range(0, len(cells), config.batch_size):
        chunk = cells[s : s + config.batch_size]
        crops = np.stack([image[ys[i] : ys[i] + win, xs[j] : xs[j] + win] for i, j in chunk])
        p = _classify(classifier, bilinear_resize(crops, r, r))
        if probs is None:
            probs = np.zeros((p.shape[1], len(cy), len(cx)))
        for (i, j), row in zip(chunk, p):
            probs[:, i, j] = row
    return Heatmap(probs, cy, cx, (h, w), config.window, config.stride, config.resize_to)


def threshold_regions(heatmap: Heatmap, config: LocalizeConfig = LocalizeConfig()) -> list[Region]:
    """4-connected components of above-threshold cells, one Region each.

    A region's box is the tight box around its cells' pixel tiles, or around
    their crops when ``config.footprint == "window"``.
    """
    regions = []
    for k in config.classes:
        if k >= len(heatmap.probs):
            continue
        grid = heatmap.probs[k]
        labels, n = ndimage.label(grid >= config.threshold)
        for comp in range(1, n + 1):
            ii, jj = np.nonzero(labels == comp)
            rects = [heatmap.tile(i, j) if config.footprint == "cell" else heatmap.crop(i, j)
                     for i, j in zip(ii, jj)]
            x0 = min(r[0] for r in rects)
            y0 = min(r[1] for r in rects)
            x1 = max(r[0] + r[2] for r in rects)
            y1 = max(r[1] + r[3] for r in rects)
            regions.append(Region(int(x0), int(y0), int(x1 - x0), int(y1 - y0), k, float(grid[ii, jj].max()),
                                  int(len(ii))))
    return regions


def top_region(regions: list[Region]) -> Region | None:
    """Highest peak score; ties go to the larger component, then the earlier one."""
    best = None
    for r in regions:
        if best is None or (r.score, r.cells) > (best.score, best.cells):
            best = r
    return best


def iou(a: tuple, b: tuple) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def render_overlay(image: np.ndarray, regions: list[Region], palette: dict = PALETTE) -> np.ndarray:
    """RGB copy of ``image`` with a 1-pixel rectangle outline per region.

    Regions are drawn in order, so later outlines cover earlier ones where
    they cross.
    """
    out = np.asarray(image, dtype=np.float64)
    if out.ndim == 2:
        out = out[:, :, None]
    out = np.repeat(out, 3, axis=2) if out.shape[2] == 1 else out.copy()
    h, w = out.shape[:2]
    for r in regions:
        if r.x < 0 or r.y < 0 or r.x + r.w > w or r.y + r.h > h or r.w < 1 or r.h < 1:
            raise ValueError(f"region {r.bbox} outside image {w}x{h}")
        color = np.asarray(palette[r.label], dtype=np.float64)
        x1, y1 = r.x + r.w - 1, r.y + r.h - 1
        out[r.y, r.x : x1 + 1] = color
        out[y1, r.x : x1 + 1] = color
        out[r.y : y1 + 1, r.x] = color
        out[r.y : y1 + 1, x1] = color
    return out


@dataclass
class MaskOracle:
    """Ground-truth classifier for synthetic images.

    Meant to be run over the damage *mask* (as a one-channel image). A crop
    fires for ``label`` (probability 1) when it holds at least ``coverage`` of
    the mask's pixels; otherwise all mass goes to "no damage". The covered
    fraction is estimated from the mean of the resized crop.
    """

    mask_area: float
    label: int
    window: int
    coverage: float = 0.25
    num_classes: int = len(CLASS_NAMES)

    def __call__(self, crops: np.ndarray) -> np.ndarray:
        frac = crops.reshape(len(crops), -1).mean(axis=1) * self.window**2 / self.mask_area
        out = np.zeros((len(crops), self.num_classes))
        fire = frac >= self.coverage
        out[fire, self.label] = 1.0
        out[~fire, NO_DAMAGE] = 1.0
        return out
