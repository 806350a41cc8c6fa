"""Corpus ingestion: glomerulus patch extraction, prompt construction, and
dataset manifests.

Slides are plain raster images (PNG/TIFF read through Pillow), annotations are
line-delimited JSON records, and extracted patches are written as
``{wsi_id}__{glom_id}.png`` next to a JSONL manifest. The harness never reads
whole-slide pyramids; detection/segmentation happens upstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import AnnotationOutOfBoundsError, ConfigurationError, ValidationError

DEFAULT_PROMPT_TEMPLATE = "A histopathology image of {label}"
DEFAULT_EXPANSION = 50
WHITE = 255


@dataclass(frozen=True)
class GlomerulusAnnotation:
    """One annotated glomerulus: slide id, object id, class label, pixel bbox."""

    wsi_id: str
    glom_id: str
    label: str
    bbox: tuple[int, int, int, int]  # (x_min, y_min, x_max, y_max)

    def __post_init__(self) -> None:
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ValidationError(
                f"annotation {self.wsi_id}/{self.glom_id}: degenerate bbox {self.bbox}"
            )


@dataclass
class SlidePatch:
    """A square RGB crop around one glomerulus, with provenance."""

    wsi_id: str
    glom_id: str
    label: str
    pixels: np.ndarray  # H x W x 3 uint8, H == W
    source_bbox: tuple[int, int, int, int]

    def __post_init__(self) -> None:
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ValidationError(
                f"patch {self.patch_id}: expected HxWx3 uint8, got "
                f"shape={px.shape} dtype={px.dtype}"
            )
        if px.shape[0] != px.shape[1]:
            raise ValidationError(f"patch {self.patch_id}: not square {px.shape}")

    @property
    def patch_id(self) -> str:
        return f"{self.wsi_id}__{self.glom_id}"


@dataclass(frozen=True)
class PromptSet:
    """One prompt string per class, in class order, from a single template."""

    template: str
    prompts: dict[str, str]  # class name -> prompt, insertion-ordered

    @property
    def classes(self) -> list[str]:
        return list(self.prompts)

    def as_list(self) -> list[str]:
        return list(self.prompts.values())


@dataclass(frozen=True)
class PatchRecord:
    """Manifest entry: where one patch lives on disk plus its metadata."""

    wsi_id: str
    glom_id: str
    label: str
    path: str

    @property
    def patch_id(self) -> str:
        return f"{self.wsi_id}__{self.glom_id}"


@dataclass
class DatasetManifest:
    """Index of extracted patches with the class list and slide inventory."""

    patches: list[PatchRecord]
    classes: list[str]
    wsi_ids: set[str] = field(default_factory=set)

    def __post_init__(self) -> None:
        if not self.wsi_ids:
            self.wsi_ids = {p.wsi_id for p in self.patches}
        seen: set[str] = set()
        class_set = set(self.classes)
        for rec in self.patches:
            if rec.label not in class_set:
                raise ValidationError(
                    f"patch {rec.patch_id}: label {rec.label!r} not in class list"
                )
            if rec.wsi_id not in self.wsi_ids:
                raise ValidationError(
                    f"patch {rec.patch_id}: wsi {rec.wsi_id!r} missing from header"
                )
            if rec.patch_id in seen:
                raise ValidationError(f"duplicate patch id {rec.patch_id!r}")
            seen.add(rec.patch_id)

    def by_id(self) -> dict[str, PatchRecord]:
        return {p.patch_id: p for p in self.patches}

    def ids_for_class(self, label: str) -> list[str]:
        return [p.patch_id for p in self.patches if p.label == label]


def extract_patch(
    image: np.ndarray,
    ann: GlomerulusAnnotation,
    expansion: int = DEFAULT_EXPANSION,
) -> SlidePatch:
    """Cut a square patch around an annotated glomerulus.

    The bbox is expanded by ``expansion`` pixels on all four sides, then grown
    to a square whose side is the larger dimension of the expanded box. The
    square is centered on the expanded box (when the size difference is odd,
    the extra pixel goes to the right/bottom). Regions falling outside the
    slide raster are filled with white.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"slide raster must be HxWx3, got {image.shape}")
    height, width = image.shape[:2]
    x0, y0, x1, y1 = ann.bbox
    if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
        raise AnnotationOutOfBoundsError(
            f"annotation {ann.wsi_id}/{ann.glom_id}: bbox {ann.bbox} outside "
            f"slide of size {width}x{height}"
        )

    ex0, ey0 = x0 - expansion, y0 - expansion
    ex1, ey1 = x1 + expansion, y1 + expansion
    ew, eh = ex1 - ex0, ey1 - ey0
    side = max(ew, eh)
    cx0 = ex0 - (side - ew) // 2
    cy0 = ey0 - (side - eh) // 2

    out = np.full((side, side, 3), WHITE, dtype=np.uint8)
    src_x0, src_x1 = max(cx0, 0), min(cx0 + side, width)
    src_y0, src_y1 = max(cy0, 0), min(cy0 + side, height)
    if src_x0 < src_x1 and src_y0 < src_y1:
        out[src_y0 - cy0 : src_y1 - cy0, src_x0 - cx0 : src_x1 - cx0] = image[
            src_y0:src_y1, src_x0:src_x1
        ]
    return SlidePatch(
        wsi_id=ann.wsi_id,
        glom_id=ann.glom_id,
        label=ann.label,
        pixels=out,
        source_bbox=ann.bbox,
    )


def build_prompts(
    classes: Sequence[str], template: str = DEFAULT_PROMPT_TEMPLATE
) -> PromptSet:
    """Instantiate the prompt template once per class, preserving class order."""
    if template.count("{label}") != 1:
        raise ConfigurationError(
            f"prompt template must contain exactly one {{label}} placeholder: "
            f"{template!r}"
        )
    if len(set(classes)) != len(classes):
        raise ConfigurationError("class list contains duplicates")
    return PromptSet(
        template=template,
        prompts={c: template.format(label=c) for c in classes},
    )


def load_annotations(path: str | Path, classes: Sequence[str]) -> list[GlomerulusAnnotation]:
    """Read line-delimited JSON annotation records and validate labels."""
    class_set = set(classes)
    anns: list[GlomerulusAnnotation] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}:{lineno}: bad JSON record: {exc}") from exc
        try:
            ann = GlomerulusAnnotation(
                wsi_id=str(rec["wsi_id"]),
                glom_id=str(rec["glom_id"]),
                label=str(rec["label"]),
                bbox=(int(rec["x_min"]), int(rec["y_min"]), int(rec["x_max"]), int(rec["y_max"])),
            )
        except KeyError as exc:
            raise ValidationError(f"{path}:{lineno}: missing field {exc}") from exc
        if ann.label not in class_set:
            raise ValidationError(
                f"{path}:{lineno}: unknown label {ann.label!r} "
                f"(configured classes: {sorted(class_set)})"
            )
        anns.append(ann)
    return anns


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write the manifest as JSONL: one header record, then one per patch."""
    lines = [
        json.dumps(
            {
                "type": "header",
                "classes": manifest.classes,
                "wsi_ids": sorted(manifest.wsi_ids),
            }
        )
    ]
    for rec in manifest.patches:
        lines.append(
            json.dumps(
                {
                    "type": "patch",
                    "wsi_id": rec.wsi_id,
                    "glom_id": rec.glom_id,
                    "label": rec.label,
                    "path": rec.path,
                }
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    """Load and validate a JSONL manifest.

    Raises ValidationError on unknown labels, duplicate patch ids, or (when
    ``check_files``) missing patch image files.
    """
    path = Path(path)
    header: dict | None = None
    records: list[PatchRecord] = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("type") == "header":
            if header is not None:
                raise ValidationError(f"{path}:{lineno}: duplicate header record")
            header = rec
        elif rec.get("type") == "patch":
            records.append(
                PatchRecord(
                    wsi_id=rec["wsi_id"],
                    glom_id=rec["glom_id"],
                    label=rec["label"],
                    path=rec["path"],
                )
            )
        else:
            raise ValidationError(f"{path}:{lineno}: unknown record type {rec.get('type')!r}")
    if header is None:
        raise ValidationError(f"{path}: manifest has no header record")
    manifest = DatasetManifest(
        patches=records,
        classes=list(header["classes"]),
        wsi_ids=set(header["wsi_ids"]),
    )
    if check_files:
        root = path.parent
        for rec in manifest.patches:
            p = Path(rec.path)
            if not p.is_absolute():
                p = root / p
            if not p.exists():
                raise ValidationError(f"patch file missing: {p} (for {rec.patch_id})")
    return manifest


def load_patch(rec: PatchRecord, root: str | Path | None = None) -> SlidePatch:
    """Load one manifest entry's pixels from disk."""
    p = Path(rec.path)
    if not p.is_absolute() and root is not None:
        p = Path(root) / p
    pixels = np.asarray(Image.open(p).convert("RGB"), dtype=np.uint8)
    return SlidePatch(
        wsi_id=rec.wsi_id,
        glom_id=rec.glom_id,
        label=rec.label,
        pixels=pixels,
        source_bbox=(0, 0, pixels.shape[1], pixels.shape[0]),
    )


def load_patches(
    manifest: DatasetManifest, ids: Iterable[str], root: str | Path | None = None
) -> list[SlidePatch]:
    """Load a set of patches by id, in the order given."""
    index = manifest.by_id()
    out = []
    for pid in ids:
        if pid not in index:
            raise ValidationError(f"unknown patch id {pid!r}")
        out.append(load_patch(index[pid], root=root))
    return out


def extract_corpus(
    slides_dir: str | Path,
    annotations_path: str | Path,
    out_dir: str | Path,
    classes: Sequence[str],
    expansion: int = DEFAULT_EXPANSION,
) -> DatasetManifest:
    """Extract every annotated patch and write patches + manifest to out_dir.

    Slide rasters are looked up as ``{slides_dir}/{wsi_id}.png`` (or .tif/.jpg).
    Annotations with out-of-bounds boxes abort extraction.
    """
    slides_dir = Path(slides_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    anns = load_annotations(annotations_path, classes)

    rasters: dict[str, np.ndarray] = {}
    records: list[PatchRecord] = []
    for ann in anns:
        if ann.wsi_id not in rasters:
            raster_path = _find_slide(slides_dir, ann.wsi_id)
            rasters[ann.wsi_id] = np.asarray(
                Image.open(raster_path).convert("RGB"), dtype=np.uint8
            )
        patch = extract_patch(rasters[ann.wsi_id], ann, expansion=expansion)
        fname = f"{patch.patch_id}.png"
        Image.fromarray(patch.pixels).save(out_dir / fname)
        records.append(
            PatchRecord(wsi_id=ann.wsi_id, glom_id=ann.glom_id, label=ann.label, path=fname)
        )

    manifest = DatasetManifest(patches=records, classes=list(classes))
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def _find_slide(slides_dir: Path, wsi_id: str) -> Path:
    for ext in (".png", ".tif", ".tiff", ".jpg", ".jpeg"):
        p = slides_dir / f"{wsi_id}{ext}"
        if p.exists():
            return p
    raise ValidationError(f"no slide raster found for {wsi_id!r} under {slides_dir}")
