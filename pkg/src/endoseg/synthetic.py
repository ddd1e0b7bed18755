"""Planted synthetic datasets for tests and demos.

Each image is a grid-aligned mosaic of 2-3 rectangular regions; every
region carries one planted concept, realized as a distinct feature
direction in the patch tensors and a distinct flat color in the rendered
image.  One concept doubles as the "polyp": images containing it get a
binary ground-truth mask.  Run ``python -m endoseg.synthetic --out DIR``
to materialize a dataset on disk.
"""

from __future__ import annotations

import argparse
import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data_model import PatchFeatureTensor, dump_json, write_features


@dataclass(frozen=True)
class SyntheticTruth:
    """Ground truth kept aside for oracle checks."""

    concept_maps: dict[str, np.ndarray]   # image_id -> [grid_h, grid_w] concept ids
    directions: np.ndarray                # [n_concepts, dim] planted feature axes
    polyp_concept: int
    patch_size: int


def _concept_colors(n: int) -> np.ndarray:
    colors = []
    for i in range(n):
        hue = (0.13 + i * 0.6180339887498949) % 1.0
        colors.append(colorsys.hsv_to_rgb(hue, 0.8, 0.9))
    return np.asarray(colors)


def _split_regions(grid_h: int, grid_w: int, n_regions: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Partition the grid into axis-aligned rectangles with min side 2."""
    rects = [(0, 0, grid_h, grid_w)]
    while len(rects) < n_regions:
        rects.sort(key=lambda r: (r[2] - r[0]) * (r[3] - r[1]), reverse=True)
        r0, c0, r1, c1 = rects.pop(0)
        h, w = r1 - r0, c1 - c0
        if h >= w and h >= 4:
            cut = int(rng.integers(2, h - 1))
            rects += [(r0, c0, r0 + cut, c1), (r0 + cut, c0, r1, c1)]
        elif w >= 4:
            cut = int(rng.integers(2, w - 1))
            rects += [(r0, c0, r1, c0 + cut), (r0, c0 + cut, r1, c1)]
        else:
            rects.append((r0, c0, r1, c1))
            break
    region_map = np.zeros((grid_h, grid_w), dtype=np.int32)
    for i, (r0, c0, r1, c1) in enumerate(rects):
        region_map[r0:r1, c0:c1] = i
    return region_map


def generate_dataset(root: str | Path, n_images: int = 40,
                     grid: tuple[int, int] = (8, 8), patch_size: int = 8,
                     dim: int = 16, n_blocks: int = 4, n_concepts: int = 3,
                     polyp_concept: int = 2, seed: int = 0,
                     feature_noise: float = 0.05) -> SyntheticTruth:
    """Write images/, features/, gt/ and manifest.json under ``root``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    grid_h, grid_w = grid

    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    directions = basis.T[:n_concepts]
    colors = _concept_colors(n_concepts)

    entries = []
    concept_maps: dict[str, np.ndarray] = {}
    for i in range(n_images):
        image_id = f"img-{i:03d}"
        n_regions = int(rng.integers(2, min(3, n_concepts) + 1))
        region_map = _split_regions(grid_h, grid_w, n_regions, rng)
        n_regions = int(region_map.max()) + 1
        region_concepts = rng.permutation(n_concepts)[:n_regions]
        concept_map = region_concepts[region_map]
        concept_maps[image_id] = concept_map

        feats = (directions[concept_map][None, :, :, :]
                 + feature_noise * rng.standard_normal((n_blocks, grid_h, grid_w, dim)))
        write_features(root / "features" / f"{image_id}.pft",
                       PatchFeatureTensor(image_id=image_id,
                                          data=feats.astype(np.float32)))

        pixels = np.repeat(np.repeat(colors[concept_map], patch_size, axis=0),
                           patch_size, axis=1)
        pixels = np.clip(pixels + 0.02 * rng.standard_normal(pixels.shape), 0, 1)
        img_path = root / "images" / f"{image_id}.png"
        img_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray((pixels * 255).astype(np.uint8)).save(img_path)

        entry: dict = {"id": image_id, "image_path": f"images/{image_id}.png"}
        dominant = int(np.bincount(concept_map.ravel(),
                                   minlength=n_concepts).argmax())
        entry["label"] = dominant
        # MCES subset: two of every three images, straddling both folds
        if i % 3 != 0:
            entry["mces_label"] = dominant % 3 + 1

        if polyp_concept in region_concepts:
            gt = np.repeat(np.repeat(concept_map == polyp_concept, patch_size,
                                     axis=0), patch_size, axis=1)
            gt_path = root / "gt" / f"{image_id}.png"
            gt_path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray((gt * 255).astype(np.uint8), mode="L").save(gt_path)
            entry["gt_mask_path"] = f"gt/{image_id}.png"
        entries.append(entry)

    folds = {
        "fold-0": [e["id"] for i, e in enumerate(entries) if i % 2 == 0],
        "fold-1": [e["id"] for i, e in enumerate(entries) if i % 2 == 1],
    }
    dump_json(root / "manifest.json", {
        "dataset_id": f"synthetic-{seed}",
        "classes": [f"concept-{c}" for c in range(n_concepts)],
        "folds": folds,
        "images": entries,
    })
    return SyntheticTruth(concept_maps=concept_maps, directions=directions,
                          polyp_concept=polyp_concept, patch_size=patch_size)


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(description="generate a planted synthetic dataset")
    parser.add_argument("--out", required=True, type=Path)
    parser.add_argument("--images", type=int, default=40)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--grid", type=int, default=8)
    parser.add_argument("--patch-size", type=int, default=8)
    parser.add_argument("--dim", type=int, default=16)
    args = parser.parse_args(argv)
    generate_dataset(args.out, n_images=args.images, seed=args.seed,
                     grid=(args.grid, args.grid), patch_size=args.patch_size,
                     dim=args.dim)
    print(f"wrote synthetic dataset to {args.out}")


if __name__ == "__main__":
    main()
