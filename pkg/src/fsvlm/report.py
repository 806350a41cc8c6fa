"""Render result tables and figures from a completed (or partial) grid.

Outputs, all stamped with the config fingerprint:

- ``table_<metric>.csv`` / ``.md``: rows backbone x strategy, one column per
  shot level, cells "mean±sd";
- ``roc/<backbone>__<strategy>.png``: ROC panels across shots (best-AUC run);
- ``per_class_auc.csv`` + ``per_class_auc__<backbone>.png``: per-class AUC
  distributions across runs;
- ``alignment_gap.csv`` + ``alignment_gap__<backbone>.png``: alignment and
  similarity-gap curves vs shots;
- ``projections/<backbone>__<strategy>__s<k>.png``: density panels from the
  best-AUC run's dumped embeddings (text markers omitted for head-only
  adaptation);
- ``provenance.json``.

Rendering is deterministic: rerunning on the same records produces byte
identical tables.
"""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .diagnostics import export_density_figure
from .encoder import load_embeddings
from .errors import ReportError
from .projection import ProjectionParams, project_2d
from .runner import METRIC_KEYS, ZEROSHOT, ExperimentConfig, ResultTable, RunRecord

_METRIC_TITLES = {"accuracy": "Accuracy", "macro_auc": "AUC", "macro_f1": "F1"}


def render_report(
    table: ResultTable,
    records: Sequence[RunRecord],
    config: ExperimentConfig,
    out_dir: str | Path,
) -> Path:
    """Write every table and figure for the given records."""
    records = [r for r in records if r.status == "ok" and r.metrics is not None]
    if not records:
        raise ReportError("no successful records to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fingerprint = config.fingerprint()

    backbones = [n for n in config.backbone_names if any(r.backbone == n for r in records)]
    strategies = [
        s for s in config.strategies if any(r.strategy in (s, ZEROSHOT) for r in records)
    ]
    shots = list(config.shots)

    for metric in METRIC_KEYS:
        _write_metric_table(table, metric, backbones, strategies, shots, out_dir, fingerprint)
    _write_per_class_auc(records, out_dir, fingerprint, backbones, strategies, shots)
    _write_alignment_gap(table, out_dir, fingerprint, backbones, strategies, shots)
    _render_roc_grids(records, out_dir, fingerprint, backbones, strategies, shots)
    _render_projection_panels(records, config, out_dir, fingerprint, backbones, strategies, shots)

    (out_dir / "provenance.json").write_text(
        json.dumps(
            {
                "config_fingerprint": fingerprint,
                "n_records": len(records),
                "backbones": backbones,
                "strategies": strategies,
                "shots": shots,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    return out_dir


def _cell_text(table: ResultTable, backbone: str, strategy: str, k: int, metric: str) -> str:
    stat = table.get(backbone, strategy, k, metric)
    if stat is None:
        return "-"
    return f"{stat.mean:.4f}±{stat.sd:.4f}"


def _write_metric_table(
    table: ResultTable,
    metric: str,
    backbones: Sequence[str],
    strategies: Sequence[str],
    shots: Sequence[int],
    out_dir: Path,
    fingerprint: str,
) -> None:
    rows = []
    for backbone in backbones:
        for strategy in strategies:
            cells = [_cell_text(table, backbone, strategy, k, metric) for k in shots]
            rows.append((backbone, strategy, cells))

    csv_lines = [f"# config_fingerprint={fingerprint}"]
    csv_lines.append("backbone,strategy," + ",".join(f"shot_{k}" for k in shots))
    for backbone, strategy, cells in rows:
        csv_lines.append(f"{backbone},{strategy}," + ",".join(cells))
    (out_dir / f"table_{metric}.csv").write_text("\n".join(csv_lines) + "\n")

    md_lines = [f"### {_METRIC_TITLES.get(metric, metric)} (mean±SD)", ""]
    md_lines.append("| Backbone | Strategy | " + " | ".join(str(k) for k in shots) + " |")
    md_lines.append("|" + "---|" * (2 + len(shots)))
    for backbone, strategy, cells in rows:
        md_lines.append(f"| {backbone} | {strategy} | " + " | ".join(cells) + " |")
    md_lines.append("")
    md_lines.append(f"config fingerprint: `{fingerprint}`")
    (out_dir / f"table_{metric}.md").write_text("\n".join(md_lines) + "\n")


def _records_by_cell(records: Sequence[RunRecord]) -> dict[tuple, list[RunRecord]]:
    cells: dict[tuple, list[RunRecord]] = defaultdict(list)
    for r in records:
        cells[(r.backbone, r.strategy, r.shots)].append(r)
    return cells


def _best_record(recs: Sequence[RunRecord]) -> RunRecord:
    return max(recs, key=lambda r: r.metrics.macro_auc)


def _resolve_cell(
    cells: dict[tuple, list[RunRecord]], backbone: str, strategy: str, k: int
) -> list[RunRecord]:
    """Strategy cell, falling back to the shared zero-shot record for k=0."""
    recs = cells.get((backbone, strategy, k), [])
    if not recs and k == 0:
        recs = cells.get((backbone, ZEROSHOT, 0), [])
    return recs


def _write_per_class_auc(
    records: Sequence[RunRecord],
    out_dir: Path,
    fingerprint: str,
    backbones: Sequence[str],
    strategies: Sequence[str],
    shots: Sequence[int],
) -> None:
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    cells = _records_by_cell(records)
    lines = [f"# config_fingerprint={fingerprint}", "backbone,strategy,shots,run_id,class,auc"]
    for backbone in backbones:
        for strategy in strategies:
            for k in shots:
                for r in sorted(_resolve_cell(cells, backbone, strategy, k), key=lambda r: r.run_id):
                    for cls, auc in r.metrics.per_class_auc.items():
                        lines.append(f"{backbone},{strategy},{k},{r.run_id},{cls},{auc:.6f}")
    (out_dir / "per_class_auc.csv").write_text("\n".join(lines) + "\n")

    class_names = sorted({c for r in records for c in r.metrics.per_class_auc})
    for backbone in backbones:
        fig, axes = plt.subplots(
            1, len(class_names), figsize=(3.0 * len(class_names), 3.2), dpi=120, squeeze=False
        )
        for col, cls in enumerate(class_names):
            ax = axes[0][col]
            positions, data, labels = [], [], []
            pos = 0
            for k in shots:
                for strategy in strategies:
                    values = [
                        r.metrics.per_class_auc[cls]
                        for r in _resolve_cell(cells, backbone, strategy, k)
                        if cls in r.metrics.per_class_auc
                    ]
                    if values:
                        positions.append(pos)
                        data.append(values)
                        labels.append(f"{strategy[:4]}@{k}")
                        pos += 1
                pos += 1
            if data:
                ax.boxplot(data, positions=positions, widths=0.7)
                ax.set_xticks(positions)
                ax.set_xticklabels(labels, rotation=90, fontsize=5)
            ax.set_title(cls, fontsize=7)
            ax.set_ylim(0.0, 1.05)
        fig.suptitle(f"per-class AUC across runs — {backbone}", fontsize=9)
        fig.tight_layout()
        fig.savefig(
            out_dir / f"per_class_auc__{backbone}.png",
            metadata={"config-fingerprint": fingerprint},
        )
        plt.close(fig)


def _write_alignment_gap(
    table: ResultTable,
    out_dir: Path,
    fingerprint: str,
    backbones: Sequence[str],
    strategies: Sequence[str],
    shots: Sequence[int],
) -> None:
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    lines = [
        f"# config_fingerprint={fingerprint}",
        "backbone,strategy,shots,alignment_mean,alignment_sd,gap_mean,gap_sd",
    ]
    for backbone in backbones:
        for strategy in strategies:
            for k in shots:
                a = table.get(backbone, strategy, k, "alignment")
                g = table.get(backbone, strategy, k, "similarity_gap")
                if a is None and g is None:
                    continue
                fmt = lambda s: f"{s.mean:.6f},{s.sd:.6f}" if s else ","
                lines.append(f"{backbone},{strategy},{k},{fmt(a)},{fmt(g)}")
    (out_dir / "alignment_gap.csv").write_text("\n".join(lines) + "\n")

    for backbone in backbones:
        fig, (ax_a, ax_g) = plt.subplots(1, 2, figsize=(8.0, 3.2), dpi=120)
        for strategy in strategies:
            ks, al, gp = [], [], []
            for k in shots:
                a = table.get(backbone, strategy, k, "alignment")
                g = table.get(backbone, strategy, k, "similarity_gap")
                if a is None or g is None:
                    continue
                ks.append(k)
                al.append(a.mean)
                gp.append(g.mean)
            if ks:
                ax_a.plot(ks, al, marker="o", label=strategy)
                ax_g.plot(ks, gp, marker="o", label=strategy)
        for ax, title in ((ax_a, "alignment"), (ax_g, "similarity gap")):
            ax.set_xlabel("shots")
            ax.set_title(f"{title} — {backbone}", fontsize=9)
            ax.legend(fontsize=6)
        fig.tight_layout()
        fig.savefig(
            out_dir / f"alignment_gap__{backbone}.png",
            metadata={"config-fingerprint": fingerprint},
        )
        plt.close(fig)


def _render_roc_grids(
    records: Sequence[RunRecord],
    out_dir: Path,
    fingerprint: str,
    backbones: Sequence[str],
    strategies: Sequence[str],
    shots: Sequence[int],
) -> None:
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    cells = _records_by_cell(records)
    roc_dir = out_dir / "roc"
    roc_dir.mkdir(exist_ok=True)
    for backbone in backbones:
        for strategy in strategies:
            panels = [
                (k, _best_record(recs))
                for k in shots
                if (recs := _resolve_cell(cells, backbone, strategy, k))
            ]
            if not panels:
                continue
            fig, axes = plt.subplots(
                1, len(panels), figsize=(2.6 * len(panels), 2.9), dpi=120, squeeze=False
            )
            for col, (k, rec) in enumerate(panels):
                ax = axes[0][col]
                for cls, pts in sorted(rec.metrics.roc.items()):
                    arr = np.asarray(pts)
                    ax.plot(arr[:, 0], arr[:, 1], linewidth=0.9, label=cls)
                ax.plot([0, 1], [0, 1], linestyle=":", color="gray", linewidth=0.7)
                ax.set_title(f"{k} shots (AUC {rec.metrics.macro_auc:.3f})", fontsize=7)
                ax.set_xlim(-0.02, 1.02)
                ax.set_ylim(-0.02, 1.02)
                if col == 0:
                    ax.legend(fontsize=4)
            fig.suptitle(f"ROC — {backbone} / {strategy}", fontsize=9)
            fig.tight_layout()
            fig.savefig(
                roc_dir / f"{backbone}__{strategy}.png",
                metadata={"config-fingerprint": fingerprint},
            )
            plt.close(fig)


def _render_projection_panels(
    records: Sequence[RunRecord],
    config: ExperimentConfig,
    out_dir: Path,
    fingerprint: str,
    backbones: Sequence[str],
    strategies: Sequence[str],
    shots: Sequence[int],
) -> None:
    cells = _records_by_cell(records)
    proj_dir = out_dir / "projections"
    proj_dir.mkdir(exist_ok=True)
    for backbone in backbones:
        for strategy in strategies:
            for k in shots:
                recs = _resolve_cell(cells, backbone, strategy, k)
                if not recs:
                    continue
                best = _best_record(recs)
                if best.emb_dir is None:
                    continue
                emb_dir = Path(best.emb_dir)
                if not (emb_dir / "images" / "meta.json").exists():
                    continue
                _density_panel_from_dump(
                    emb_dir,
                    config.projection,
                    proj_dir / f"{backbone}__{strategy}__s{k}.png",
                    include_text=strategy != "classifier",
                    title=f"{backbone} / {strategy} / {k} shots (run {best.run_id})",
                    fingerprint=fingerprint,
                )


def _density_panel_from_dump(
    emb_dir: Path,
    params: ProjectionParams,
    out_path: Path,
    include_text: bool,
    title: str,
    fingerprint: str,
) -> None:
    images = load_embeddings(emb_dir / "images")
    texts_path = emb_dir / "texts"
    text_points: Optional[np.ndarray] = None
    if include_text and (texts_path / "meta.json").exists():
        texts = load_embeddings(texts_path)
        coords = project_2d(np.vstack([images.vectors, texts.vectors]), params)
        image_points, text_points = coords[: images.n], coords[images.n :]
    else:
        image_points = project_2d(images.vectors, params)
    class_names = images.class_names or sorted({str(l) for l in images.labels})
    export_density_figure(
        image_points,
        images.labels,
        class_names,
        out_path,
        text_points=text_points,
        title=title,
        metadata={"config-fingerprint": fingerprint},
    )
