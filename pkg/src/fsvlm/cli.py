"""``fsvlm`` command line interface.

Global flags (before the subcommand): ``--config``, ``--seed``, ``--out``,
``--resume``. Subcommands: prepare, plan-splits, train, evaluate, diagnose,
report, run-grid. The backbone weight cache location can be pointed at with
the ``FSVLM_CACHE`` environment variable.
"""

from __future__ import annotations

import json
from pathlib import Path

import click

from .corpus import extract_corpus, load_manifest
from .sampler import SplitManifest, plan_runs, save_plans
from .synthetic import DEFAULT_CLASSES, make_synthetic_dataset


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--seed", type=int, default=None, help="override the config's master seed")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.option("--resume/--no-resume", default=True, help="reuse finished records on rerun")
@click.pass_context
def main(ctx: click.Context, config_path, seed, out_dir, resume):
    """Few-shot vision-language adaptation benchmark harness."""
    ctx.ensure_object(dict)
    ctx.obj.update(config_path=config_path, seed=seed, out_dir=out_dir, resume=resume)


def _load_config(ctx: click.Context):
    from .runner import ExperimentConfig

    path = ctx.obj.get("config_path")
    if path is None:
        raise click.UsageError("this command needs --config (given before the subcommand)")
    return ExperimentConfig.from_file(
        path, seed_override=ctx.obj.get("seed"), out_override=ctx.obj.get("out_dir")
    )


@main.command()
@click.option("--slides", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--annotations", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--synthetic", is_flag=True, help="generate the bundled synthetic corpus first")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--classes", default=",".join(DEFAULT_CLASSES), help="comma-separated class names")
@click.option("--expansion", type=int, default=50, show_default=True)
@click.pass_context
def prepare(ctx, slides, annotations, synthetic, out_dir, classes, expansion):
    """Extract square patches and write the dataset manifest."""
    class_list = tuple(c.strip() for c in classes.split(","))
    out = Path(out_dir)
    if synthetic:
        manifest, split, patches_dir = make_synthetic_dataset(out, classes=class_list)
        click.echo(f"synthetic corpus: {len(manifest.patches)} patches under {patches_dir}")
        click.echo(f"split: {out / 'split.json'}")
        return
    if not slides or not annotations:
        raise click.UsageError("--slides and --annotations are required without --synthetic")
    manifest = extract_corpus(slides, annotations, out, class_list, expansion=expansion)
    click.echo(f"extracted {len(manifest.patches)} patches to {out}")


@main.command("plan-splits")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--split", "split_path", type=click.Path(exists=True), required=True)
@click.option("--runs", type=int, default=10, show_default=True)
@click.option("--superset", type=int, default=32, show_default=True)
@click.option("--seed", type=int, default=None, help="master seed (falls back to global --seed)")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.pass_context
def plan_splits(ctx, manifest_path, split_path, runs, superset, seed, out_path):
    """Write deterministic nested shot plans as JSONL."""
    master_seed = seed if seed is not None else (ctx.obj.get("seed") or 0)
    manifest = load_manifest(manifest_path)
    split = SplitManifest.load(split_path)
    plans = plan_runs(manifest, split, n_runs=runs, superset_size=superset, master_seed=master_seed)
    save_plans(plans, out_path)
    click.echo(f"wrote {len(plans)} plans ({superset} per class) to {out_path}")


@main.command()
@click.option("--backbone", required=True)
@click.option("--strategy", required=True)
@click.option("--shots", type=int, required=True)
@click.option("--run", "run_id", type=int, default=0, show_default=True)
@click.pass_context
def train(ctx, backbone, strategy, shots, run_id):
    """Train one grid cell and save its record plus a delta checkpoint."""
    import numpy as np

    from .corpus import build_prompts
    from .encoder import build_backbone
    from .runner import RecordStore, _PatchCache, _run_cell
    from .sampler import plan_runs as _plan, validation_ids

    config = _load_config(ctx)
    if shots < 1:
        raise click.UsageError("shots must be >= 1 for training; shot 0 is evaluation-only")
    manifest = load_manifest(config.manifest_path)
    split = SplitManifest.load(config.split_path)
    plans = _plan(manifest, split, config.n_runs, config.superset_size, config.master_seed)
    plan = plans[run_id]

    cache = _PatchCache(manifest, config.data_root or str(Path(config.manifest_path).parent))
    prompts = build_prompts(config.classes, config.prompt_template)
    val_patches = cache.get(validation_ids(manifest, split))
    class_index = {c: i for i, c in enumerate(config.classes)}
    val_labels = np.array([class_index[p.label] for p in val_patches], dtype=np.int64)

    spec = dict(next(b for b in config.backbones if b["name"] == backbone))
    name = spec.pop("name")
    base = build_backbone(name, **spec)
    out = Path(config.out_dir)
    ckpt = out / "checkpoints" / f"{name}__{strategy}__s{shots}__run{run_id}.pt"
    record = _run_cell(
        base, name, strategy, shots, plan, config, prompts, cache,
        val_patches, val_labels, config.fingerprint(), delta_path=ckpt,
    )
    out.mkdir(parents=True, exist_ok=True)
    RecordStore(out / "records.jsonl").append(record)
    if record.status != "ok":
        raise click.ClickException(f"training failed: {record.error}")
    click.echo(f"accuracy={record.metrics.accuracy:.4f} auc={record.metrics.macro_auc:.4f}")
    click.echo(f"checkpoint: {ckpt}")


@main.command()
@click.option("--backbone", required=True)
@click.option("--delta", type=click.Path(exists=True, dir_okay=False), default=None,
              help="strategy delta checkpoint; omit for the zero-shot baseline")
@click.pass_context
def evaluate(ctx, backbone, delta):
    """Evaluate zero-shot or a delta checkpoint on the validation split."""
    import numpy as np

    from .adapt import load_delta
    from .corpus import build_prompts
    from .encoder import build_backbone, classify, encode_images, encode_prompts
    from .metrics import evaluate_predictions
    from .runner import _evaluate_adapted, _PatchCache
    from .sampler import validation_ids

    config = _load_config(ctx)
    manifest = load_manifest(config.manifest_path)
    split = SplitManifest.load(config.split_path)
    cache = _PatchCache(manifest, config.data_root or str(Path(config.manifest_path).parent))
    val_patches = cache.get(validation_ids(manifest, split))
    class_index = {c: i for i, c in enumerate(config.classes)}
    val_labels = np.array([class_index[p.label] for p in val_patches], dtype=np.int64)
    prompts = build_prompts(config.classes, config.prompt_template)

    spec = dict(next(b for b in config.backbones if b["name"] == backbone))
    base = build_backbone(spec.pop("name"), **spec)
    if delta:
        adapted = load_delta(base, delta, n_classes=len(config.classes))
        result, _, _, _ = _evaluate_adapted(adapted, val_patches, val_labels, prompts, config.classes)
    else:
        image_embs = encode_images(base, val_patches, classes=config.classes)
        text_embs = encode_prompts(base, prompts)
        probs, _ = classify(image_embs, text_embs, base.logit_scale_value())
        result = evaluate_predictions(probs, val_labels, config.classes)
    out = Path(ctx.obj.get("out_dir") or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(result.to_json(), indent=2) + "\n")
    click.echo(
        f"accuracy={result.accuracy:.4f} auc={result.macro_auc:.4f} f1={result.macro_f1:.4f}"
    )


@main.command()
@click.option("--images", "images_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--texts", "texts_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--neighbors", type=int, default=15, show_default=True)
@click.option("--min-dist", type=float, default=0.1, show_default=True)
@click.option("--proj-seed", type=int, default=42, show_default=True)
def diagnose(images_dir, texts_dir, out_dir, neighbors, min_dist, proj_seed):
    """Embedding diagnostics from exchange-format directories."""
    from .diagnostics import diagnose_directories
    from .projection import ProjectionParams

    params = ProjectionParams(n_neighbors=neighbors, min_dist=min_dist, seed=proj_seed)
    report = diagnose_directories(images_dir, texts_dir, out_dir, params)
    for name, value in report.scalars().items():
        click.echo(f"{name}={value:.6f}")


@main.command()
@click.pass_context
def report(ctx):
    """Render tables and figures from the record store."""
    from .report import render_report
    from .runner import RecordStore, aggregate

    config = _load_config(ctx)
    store = RecordStore(Path(config.out_dir) / "records.jsonl")
    records = store.ok_records(config.fingerprint())
    table = aggregate(records, strategies=config.strategies)
    out = Path(ctx.obj.get("out_dir") or config.out_dir) / "report"
    render_report(table, records, config, out)
    click.echo(f"report written to {out}")


@main.command("run-grid")
@click.pass_context
def run_grid_cmd(ctx):
    """Run the full backbone x strategy x shots x runs grid."""
    from .runner import run_grid

    config = _load_config(ctx)
    result = run_grid(config, resume=ctx.obj.get("resume", True))
    click.echo(
        f"grid done: computed={result.computed} skipped={result.skipped} "
        f"failed={result.failed} records={len(result.records)}"
    )


if __name__ == "__main__":
    main()
