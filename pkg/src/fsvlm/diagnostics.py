"""Cross-modal embedding diagnostics.

Four scalars over an evaluation set:

- alignment: mean cosine between each image embedding and its own class's
  text embedding;
- similarity gap: alignment minus the mean cosine over all ordered cross
  pairs (i != j), same-class cross pairs included by default ("strict" mode
  excludes them);
- intra-class distance: mean pairwise Euclidean distance among same-class
  points of the 2D projection, averaged over classes with >= 2 points;
- cosine silhouette: standard silhouette on the original embeddings under
  d = 1 - cos, singleton clusters scored 0.

Plus the density figure: per-class KDE contours over projected image points
with text embeddings overlaid as markers.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .encoder import EmbeddingBatch, load_embeddings
from .errors import ValidationError
from .projection import ProjectionParams, project_2d

logger = logging.getLogger(__name__)


@dataclass
class DiagnosticsReport:
    alignment: float
    similarity_gap: float
    intra_class_distance: float
    silhouette: float
    projection: Optional[np.ndarray] = None  # N x 2
    labels: Optional[np.ndarray] = None
    provenance: dict = field(default_factory=dict)

    def scalars(self) -> dict[str, float]:
        return {
            "alignment": self.alignment,
            "similarity_gap": self.similarity_gap,
            "intra_class_distance": self.intra_class_distance,
            "silhouette": self.silhouette,
        }

    def to_json(self) -> dict:
        rec = dict(self.scalars())
        rec["provenance"] = self.provenance
        return rec


def _paired_cosines(images: EmbeddingBatch, texts: EmbeddingBatch) -> np.ndarray:
    """N x C cosine matrix between image rows and per-class text rows."""
    if images.labels is None:
        raise ValidationError("image batch carries no labels")
    if images.dim != texts.dim:
        raise ValidationError(f"dim mismatch: image {images.dim} vs text {texts.dim}")
    if int(images.labels.max()) >= texts.n:
        missing = int(images.labels.max())
        raise ValidationError(f"no text embedding for class index {missing}")
    img = images.vectors.astype(np.float64)
    txt = texts.vectors.astype(np.float64)
    img = img / np.linalg.norm(img, axis=1, keepdims=True)
    txt = txt / np.linalg.norm(txt, axis=1, keepdims=True)
    return img @ txt.T


def alignment(images: EmbeddingBatch, texts: EmbeddingBatch) -> float:
    """Mean cosine between each sample and its own class's cross-modal row."""
    cos = _paired_cosines(images, texts)
    return float(np.mean(cos[np.arange(images.n), images.labels]))


def similarity_gap(images: EmbeddingBatch, texts: EmbeddingBatch, strict: bool = False) -> float:
    """Mean positive-pair cosine minus mean cross-pair cosine.

    The cross term averages cos(image_i, text_of_class(j)) over all ordered
    pairs i != j. By default pairs with matching classes stay in the cross
    term; ``strict=True`` drops them.
    """
    cos = _paired_cosines(images, texts)
    n = images.n
    if n < 2:
        raise ValidationError("similarity gap needs at least 2 samples")
    labels = images.labels
    positives = cos[np.arange(n), labels]
    counts = np.bincount(labels, minlength=texts.n).astype(np.float64)
    # sum over j != i of cos(x_i, t_{y_j}) = sum_c count_c * cos(x_i, t_c) - cos(x_i, t_{y_i})
    row_totals = cos @ counts
    if strict:
        cross_sum = float(np.sum(row_totals - counts[labels] * positives))
        cross_count = float(np.sum(n - counts[labels]))
        if cross_count == 0:
            raise ValidationError("strict similarity gap undefined: single class")
    else:
        cross_sum = float(np.sum(row_totals - positives))
        cross_count = float(n * (n - 1))
    return float(np.mean(positives)) - cross_sum / cross_count


def intra_class_distance(points_2d: np.ndarray, labels: Sequence[int]) -> float:
    """Per-class mean pairwise Euclidean distance, averaged over classes.

    Classes with fewer than two points have no pair and are skipped.
    """
    points = np.asarray(points_2d, dtype=np.float64)
    labels = np.asarray(labels)
    if points.ndim != 2 or points.shape[0] != labels.shape[0]:
        raise ValidationError("points/labels mismatch")
    per_class = []
    for c in np.unique(labels):
        pts = points[labels == c]
        n_c = pts.shape[0]
        if n_c < 2:
            continue
        diff = pts[:, None, :] - pts[None, :, :]
        dists = np.sqrt(np.sum(diff * diff, axis=2))
        total = float(np.sum(np.triu(dists, k=1)))
        per_class.append(total * 2.0 / (n_c * (n_c - 1)))
    if not per_class:
        raise ValidationError("no class has >= 2 points; intra-class distance undefined")
    return float(np.mean(per_class))


def silhouette_cosine(embeddings: np.ndarray, labels: Sequence[int]) -> float:
    """Mean silhouette under cosine distance on the original embeddings."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = x.shape[0]
    if n != labels.shape[0]:
        raise ValidationError("embeddings/labels mismatch")
    classes = np.unique(labels)
    if classes.shape[0] < 2:
        raise ValidationError("silhouette needs at least 2 classes")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    unit = x / norms
    dist = 1.0 - unit @ unit.T
    np.fill_diagonal(dist, 0.0)

    counts = {c: int(np.sum(labels == c)) for c in classes}
    # per-sample mean distance to each class
    class_sums = np.stack([dist[:, labels == c].sum(axis=1) for c in classes], axis=1)
    scores = np.zeros(n)
    for i in range(n):
        own = labels[i]
        own_pos = int(np.where(classes == own)[0][0])
        if counts[own] < 2:
            scores[i] = 0.0  # singleton cluster convention
            continue
        a_i = class_sums[i, own_pos] / (counts[own] - 1)
        b_i = min(
            class_sums[i, pos] / counts[c]
            for pos, c in enumerate(classes)
            if c != own
        )
        denom = max(a_i, b_i)
        scores[i] = 0.0 if denom == 0 else (b_i - a_i) / denom
    return float(np.mean(scores))


def compute_diagnostics(
    images: EmbeddingBatch,
    texts: Optional[EmbeddingBatch],
    projection_params: ProjectionParams = ProjectionParams(),
    provenance: Optional[dict] = None,
    strict_gap: bool = False,
) -> DiagnosticsReport:
    """All four scalars plus the 2D projection for one evaluation set.

    ``texts=None`` (no text tower available) leaves alignment and gap as NaN.
    """
    if images.labels is None:
        raise ValidationError("image batch carries no labels")
    coords = project_2d(images.vectors, projection_params)
    report = DiagnosticsReport(
        alignment=alignment(images, texts) if texts is not None else float("nan"),
        similarity_gap=similarity_gap(images, texts, strict=strict_gap)
        if texts is not None
        else float("nan"),
        intra_class_distance=intra_class_distance(coords, images.labels),
        silhouette=silhouette_cosine(images.vectors, images.labels),
        projection=coords,
        labels=images.labels.copy(),
        provenance=provenance or {},
    )
    return report


def export_density_figure(
    points_2d: np.ndarray,
    labels: Sequence[int],
    class_names: Sequence[str],
    out_path: str | Path,
    text_points: Optional[np.ndarray] = None,
    title: str = "",
    metadata: Optional[dict[str, str]] = None,
) -> Path:
    """Per-class KDE contours over projected image points.

    Text embedding projections, when given (one per class), are overlaid as
    star markers; head-only adaptations pass ``text_points=None``. Bandwidth
    follows Scott's rule and is recorded in the PNG metadata. Classes with no
    points are dropped from the legend with a warning.
    """
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt
    from scipy.stats import gaussian_kde

    points = np.asarray(points_2d, dtype=np.float64)
    labels = np.asarray(labels)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    cmap = plt.get_cmap("tab10")
    fig, ax = plt.subplots(figsize=(5.0, 4.2), dpi=150)
    pad = 0.05 * (points.max() - points.min() + 1e-9)
    xs = np.linspace(points[:, 0].min() - pad, points[:, 0].max() + pad, 120)
    ys = np.linspace(points[:, 1].min() - pad, points[:, 1].max() + pad, 120)
    grid_x, grid_y = np.meshgrid(xs, ys)
    grid = np.vstack([grid_x.ravel(), grid_y.ravel()])

    bandwidths: dict[str, float] = {}
    for c, name in enumerate(class_names):
        pts = points[labels == c]
        if pts.shape[0] == 0:
            logger.warning("class %r has no points; omitted from density figure", name)
            continue
        color = cmap(c % 10)
        ax.scatter(pts[:, 0], pts[:, 1], s=8, color=color, alpha=0.5, label=name)
        if pts.shape[0] >= 3 and not _degenerate(pts):
            kde = gaussian_kde(pts.T, bw_method="scott")
            bandwidths[name] = float(kde.factor)
            density = kde(grid).reshape(grid_x.shape)
            levels = np.quantile(density[density > 0], [0.7, 0.9, 0.98])
            if np.all(np.diff(levels) > 0):
                ax.contour(grid_x, grid_y, density, levels=levels, colors=[color], linewidths=0.8)
    if text_points is not None:
        text_points = np.asarray(text_points)
        for c in range(text_points.shape[0]):
            ax.scatter(
                text_points[c, 0],
                text_points[c, 1],
                marker="*",
                s=140,
                color=cmap(c % 10),
                edgecolors="black",
                linewidths=0.6,
                zorder=5,
            )
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(fontsize=6, loc="best")
    ax.set_xticks([])
    ax.set_yticks([])

    meta = {"kde-bandwidth-rule": "scott"}
    meta.update({f"kde-factor-{k}": f"{v:.6f}" for k, v in bandwidths.items()})
    if metadata:
        meta.update(metadata)
    fig.savefig(out_path, metadata=meta)
    plt.close(fig)
    return out_path


def _degenerate(pts: np.ndarray) -> bool:
    """KDE needs a nonsingular covariance; reject (near-)collinear clouds."""
    if pts.shape[0] < 3:
        return True
    cov = np.cov(pts.T)
    return bool(np.linalg.det(cov) < 1e-12)


def diagnose_directories(
    images_dir: str | Path,
    texts_dir: Optional[str | Path],
    out_dir: str | Path,
    projection_params: ProjectionParams = ProjectionParams(),
    provenance: Optional[dict] = None,
) -> DiagnosticsReport:
    """Standalone entry: consume exchange-format directories, emit
    diagnostics.json and the density figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = load_embeddings(images_dir)
    texts = load_embeddings(texts_dir) if texts_dir is not None else None
    report = compute_diagnostics(images, texts, projection_params, provenance=provenance)

    (out_dir / "diagnostics.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")
    class_names = images.class_names or [str(c) for c in np.unique(images.labels)]
    text_points = None
    if texts is not None:
        # project text rows through the same map by appending them to the cloud
        stacked = np.vstack([images.vectors, texts.vectors])
        coords = project_2d(stacked, projection_params)
        report.projection = coords[: images.n]
        text_points = coords[images.n :]
    export_density_figure(
        report.projection,
        report.labels,
        class_names,
        out_dir / "projection.png",
        text_points=text_points,
        metadata={"provenance": json.dumps(provenance or {})},
    )
    return report
