"""Bundled synthetic corpus for desk-scale end-to-end runs.

Eight small "slides" carry colored disc "glomeruli" on a pale background; the
class determines the disc's mean color, so the five classes are linearly
separable from raw pixels by construction. The generator emits exactly the
artifacts the real pipeline consumes: slide rasters, a line-delimited
annotation file, and (via :func:`make_synthetic_dataset`) an extracted patch
corpus with manifest and WSI-level split.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .corpus import DatasetManifest, extract_corpus
from .sampler import SplitManifest

DEFAULT_CLASSES = (
    "Atubular Glomerulus",
    "Globally Sclerotic Glomerulus",
    "Ischemic Glomerulus",
    "Segmentally Sclerotic Glomerulus",
    "Viable Glomerulus",
)

CLASS_COLORS = (
    (205, 75, 75),
    (75, 170, 75),
    (80, 95, 205),
    (200, 185, 70),
    (160, 80, 195),
)

_BACKGROUND = (245, 240, 242)
_CELL = 72
_NOISE_STD = 18.0


def make_synthetic_slides(
    out_dir: str | Path,
    classes: tuple[str, ...] = DEFAULT_CLASSES,
    n_slides: int = 8,
    per_slide_per_class: int = 8,
    seed: int = 7,
) -> tuple[Path, Path]:
    """Write slide PNGs plus annotations.jsonl; returns (slides_dir, annotations)."""
    out_dir = Path(out_dir)
    slides_dir = out_dir / "slides"
    slides_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    n_per_slide = per_slide_per_class * len(classes)
    grid = int(np.ceil(np.sqrt(n_per_slide)))
    size = grid * _CELL

    ann_lines: list[str] = []
    for s in range(n_slides):
        wsi_id = f"slide{s:02d}"
        raster = np.empty((size, size, 3), dtype=np.uint8)
        raster[:] = _BACKGROUND
        # one annotation per grid cell, classes interleaved
        order = rng.permutation(n_per_slide)
        cell_assignments = [
            (cell, c)
            for c in range(len(classes))
            for cell in range(c * per_slide_per_class, (c + 1) * per_slide_per_class)
        ]
        for idx, (slot, c) in enumerate(cell_assignments):
            cell = int(order[slot])
            row, col = divmod(cell, grid)
            radius = int(rng.integers(12, 21))
            cx = col * _CELL + _CELL // 2 + int(rng.integers(-6, 7))
            cy = row * _CELL + _CELL // 2 + int(rng.integers(-6, 7))
            _draw_disc(raster, cx, cy, radius, CLASS_COLORS[c], rng)
            x0, y0 = max(cx - radius, 0), max(cy - radius, 0)
            x1, y1 = min(cx + radius, size), min(cy + radius, size)
            ann_lines.append(
                json.dumps(
                    {
                        "wsi_id": wsi_id,
                        "glom_id": f"g{idx:03d}",
                        "label": classes[c],
                        "x_min": x0,
                        "y_min": y0,
                        "x_max": x1,
                        "y_max": y1,
                    }
                )
            )
        Image.fromarray(raster).save(slides_dir / f"{wsi_id}.png")

    annotations = out_dir / "annotations.jsonl"
    annotations.write_text("\n".join(ann_lines) + "\n")
    return slides_dir, annotations


def _draw_disc(
    raster: np.ndarray,
    cx: int,
    cy: int,
    radius: int,
    color: tuple[int, int, int],
    rng: np.random.Generator,
) -> None:
    size = raster.shape[0]
    y, x = np.ogrid[:size, :size]
    mask = (x - cx) ** 2 + (y - cy) ** 2 <= radius**2
    shade = rng.normal(0.0, 8.0)
    base = np.clip(np.array(color, dtype=np.float64) + shade, 0, 255)
    noise = rng.normal(0.0, _NOISE_STD, size=(int(mask.sum()), 3))
    raster[mask] = np.clip(base[None, :] + noise, 0, 255).astype(np.uint8)


def make_synthetic_dataset(
    root: str | Path,
    classes: tuple[str, ...] = DEFAULT_CLASSES,
    n_slides: int = 8,
    n_train_slides: int = 6,
    per_slide_per_class: int = 8,
    expansion: int = 8,
    seed: int = 7,
) -> tuple[DatasetManifest, SplitManifest, Path]:
    """Generate slides, extract patches, and write manifest + split.

    Returns (manifest, split, patches_dir). With the defaults each class has
    48 training patches (>= one 32-shot superset) and 16 validation patches.
    """
    root = Path(root)
    slides_dir, annotations = make_synthetic_slides(
        root, classes=classes, n_slides=n_slides, per_slide_per_class=per_slide_per_class, seed=seed
    )
    patches_dir = root / "patches"
    manifest = extract_corpus(slides_dir, annotations, patches_dir, classes, expansion=expansion)
    wsi_ids = sorted(manifest.wsi_ids)
    split = SplitManifest.from_lists(wsi_ids[:n_train_slides], wsi_ids[n_train_slides:])
    split.save(root / "split.json")
    return manifest, split, patches_dir
