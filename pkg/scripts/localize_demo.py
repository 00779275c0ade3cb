"""Oracle localization over synthetic images: IoU of the top region with the planted box.

Example: python3 scripts/localize_demo.py --images 20 --out /tmp/loc
"""

import argparse
from pathlib import Path

import numpy as np

from cardamage.data import CLASS_NAMES, NO_DAMAGE
from cardamage.ppm import write_image
from cardamage.localize import (LocalizeConfig, MaskOracle, iou, render_overlay, sliding_window_map,
                                threshold_regions, top_region)
from cardamage.synth import make_image


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--images", type=int, default=20)
    ap.add_argument("--size", type=int, default=320)
    ap.add_argument("--window", type=int, default=100)
    ap.add_argument("--stride", type=int, default=10)
    ap.add_argument("--threshold", type=float, default=0.9)
    ap.add_argument("--footprint", choices=("cell", "window"), default="cell")
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--out", help="directory for overlay PPMs")
    args = ap.parse_args()

    cfg = LocalizeConfig(window=args.window, stride=args.stride, threshold=args.threshold,
                         footprint=args.footprint)
    damage = [k for k in range(len(CLASS_NAMES)) if k != NO_DAMAGE]
    ious = []
    for i in range(args.images):
        label = damage[i % len(damage)]
        it = make_image(label, args.size, seed=args.seed, source_id=f"loc_{i:03d}")
        mask = it.mask.astype(np.float64)
        heat = sliding_window_map(mask[:, :, None], MaskOracle(mask.sum(), label, cfg.window), cfg)
        regions = threshold_regions(heat, cfg)
        best = top_region(regions)
        v = iou(best.bbox, it.image.bbox) if best else 0.0
        ious.append(v)
        print(f"{i:3d} {CLASS_NAMES[label]:18s} truth {it.image.bbox} top {best.bbox if best else None} iou {v:.2f}")
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            write_image(Path(args.out) / f"loc_{i:03d}.ppm", render_overlay(it.image.pixels, regions))
    ious = np.array(ious)
    print(f"IoU >= 0.3 on {100 * np.mean(ious >= 0.3):.0f}% of images, mean IoU {ious.mean():.2f}")


if __name__ == "__main__":
    main()
