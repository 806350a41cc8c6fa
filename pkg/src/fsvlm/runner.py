"""Experiment grid orchestration.

Runs backbone x strategy x shots x runs, persists one JSON record per run to
an append-only ``records.jsonl``, and aggregates mean +/- sample SD per cell.
Reruns with an unchanged config skip every cell that already has an ok record
with a matching config fingerprint. Zero-shot (prompt similarity, no
training) is evaluated once per backbone and fanned out to every strategy row
at aggregation time.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import yaml

from . import adapt
from .adapt import AdaptationConfig, AdaptedModel, TrainHistory, TrainSchedule, apply_strategy
from .corpus import (
    DEFAULT_PROMPT_TEMPLATE,
    DatasetManifest,
    PromptSet,
    SlidePatch,
    build_prompts,
    load_manifest,
    load_patches,
)
from .diagnostics import compute_diagnostics
from .encoder import (
    DualEncoderBackbone,
    EmbeddingBatch,
    build_backbone,
    classify,
    encode_images,
    encode_prompts,
    save_embeddings,
)
from .errors import ConfigurationError, ValidationError
from .metrics import EvalResult, evaluate_predictions
from .projection import ProjectionParams
from .sampler import (
    SHOT_LEVELS,
    ShotPlan,
    SplitManifest,
    check_separation,
    plan_runs,
    shot_subset,
    validation_ids,
)

logger = logging.getLogger(__name__)

ZEROSHOT = "zeroshot"
METRIC_KEYS = ("accuracy", "macro_auc", "macro_f1")


@dataclass
class ExperimentConfig:
    """Everything one grid execution depends on."""

    classes: list[str]
    backbones: list[dict]  # each: {"name": ..., <builder kwargs>}
    strategies: list[str]
    manifest_path: str
    split_path: str
    out_dir: str
    shots: tuple[int, ...] = SHOT_LEVELS
    n_runs: int = 10
    master_seed: int = 0
    superset_size: int = 32
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    schedule_overrides: dict[str, dict] = field(default_factory=dict)
    adaptation: dict[str, AdaptationConfig] = field(default_factory=dict)
    projection: ProjectionParams = field(default_factory=ProjectionParams)
    data_root: Optional[str] = None

    def __post_init__(self) -> None:
        self.shots = tuple(self.shots)
        if list(self.shots) != sorted(set(self.shots)):
            raise ConfigurationError(f"shots must be strictly ascending, got {self.shots}")
        if any(k < 0 for k in self.shots):
            raise ConfigurationError("negative shot counts are not allowed")
        for s in self.strategies:
            if s not in adapt.STRATEGIES:
                raise ConfigurationError(f"unknown strategy {s!r}")
        if self.n_runs < 1:
            raise ConfigurationError("n_runs must be >= 1")

    @property
    def backbone_names(self) -> list[str]:
        return [b["name"] for b in self.backbones]

    def schedule_for(self, strategy: str) -> TrainSchedule:
        base = asdict(self.schedule)
        base.update(self.schedule_overrides.get(strategy, {}))
        return TrainSchedule(**base)

    def adaptation_for(self, strategy: str) -> AdaptationConfig:
        cfg = self.adaptation.get(strategy)
        if cfg is None:
            return AdaptationConfig(strategy=strategy)
        if cfg.strategy != strategy:
            raise ConfigurationError(
                f"adaptation config for {strategy!r} declares strategy {cfg.strategy!r}"
            )
        return cfg

    def fingerprint(self) -> str:
        canon = {
            "classes": self.classes,
            "backbones": self.backbones,
            "strategies": self.strategies,
            "shots": list(self.shots),
            "n_runs": self.n_runs,
            "master_seed": self.master_seed,
            "superset_size": self.superset_size,
            "prompt_template": self.prompt_template,
            "schedule": asdict(self.schedule),
            "schedule_overrides": self.schedule_overrides,
            "adaptation": {k: asdict(v) for k, v in sorted(self.adaptation.items())},
            "projection": asdict(self.projection),
        }
        blob = json.dumps(canon, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_file(
        cls,
        path: str | Path,
        seed_override: Optional[int] = None,
        out_override: Optional[str] = None,
    ) -> "ExperimentConfig":
        raw = yaml.safe_load(Path(path).read_text())
        paths = raw.get("paths", {})
        adaptation = {}
        for strategy, opts in (raw.get("adaptation") or {}).items():
            adaptation[strategy] = AdaptationConfig(strategy=strategy, **_tupled(opts))
        schedule = TrainSchedule(**(raw.get("schedule") or {}))
        projection = ProjectionParams(**(raw.get("projection") or {}))
        backbones = [b if isinstance(b, dict) else {"name": b} for b in raw["backbones"]]
        return cls(
            classes=list(raw["classes"]),
            backbones=backbones,
            strategies=list(raw["strategies"]),
            manifest_path=paths["manifest"],
            split_path=paths["split"],
            out_dir=out_override or paths.get("out", "results"),
            shots=tuple(raw.get("shots", SHOT_LEVELS)),
            n_runs=raw.get("n_runs", 10),
            master_seed=seed_override if seed_override is not None else raw.get("master_seed", 0),
            superset_size=raw.get("superset_size", 32),
            prompt_template=raw.get("prompt_template", DEFAULT_PROMPT_TEMPLATE),
            schedule=schedule,
            schedule_overrides=raw.get("schedule_overrides") or {},
            adaptation=adaptation,
            projection=projection,
            data_root=raw.get("data_root"),
        )


def _tupled(opts: dict) -> dict:
    out = dict(opts)
    if "lora_targets" in out:
        out["lora_targets"] = tuple(out["lora_targets"])
    return out


@dataclass
class RunRecord:
    """Outcome of one (backbone, strategy, shots, run) cell."""

    backbone: str
    strategy: str
    shots: int
    run_id: int
    seed: int
    status: str = "ok"  # ok | error
    metrics: Optional[EvalResult] = None
    diagnostics: Optional[dict] = None
    history: Optional[TrainHistory] = None
    wall_time: float = 0.0
    fingerprint: str = ""
    emb_dir: Optional[str] = None
    error: Optional[str] = None

    def key(self) -> tuple[str, str, int, int]:
        return (self.backbone, self.strategy, self.shots, self.run_id)

    def to_json(self) -> dict:
        return {
            "backbone": self.backbone,
            "strategy": self.strategy,
            "shots": self.shots,
            "run_id": self.run_id,
            "seed": self.seed,
            "status": self.status,
            "metrics": self.metrics.to_json() if self.metrics else None,
            "diagnostics": self.diagnostics,
            "history": self.history.to_json() if self.history else None,
            "wall_time": self.wall_time,
            "fingerprint": self.fingerprint,
            "emb_dir": self.emb_dir,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "RunRecord":
        return cls(
            backbone=rec["backbone"],
            strategy=rec["strategy"],
            shots=rec["shots"],
            run_id=rec["run_id"],
            seed=rec["seed"],
            status=rec["status"],
            metrics=EvalResult.from_json(rec["metrics"]) if rec.get("metrics") else None,
            diagnostics=rec.get("diagnostics"),
            history=TrainHistory.from_json(rec["history"]) if rec.get("history") else None,
            wall_time=rec.get("wall_time", 0.0),
            fingerprint=rec.get("fingerprint", ""),
            emb_dir=rec.get("emb_dir"),
            error=rec.get("error"),
        )


class RecordStore:
    """Append-only JSONL record store; later records win per cell key."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._records: dict[tuple, RunRecord] = {}
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    rec = RunRecord.from_json(json.loads(line))
                    self._records[rec.key()] = rec

    def append(self, record: RunRecord) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a") as fh:
            fh.write(json.dumps(record.to_json()) + "\n")
        self._records[record.key()] = record

    def get(self, key: tuple) -> Optional[RunRecord]:
        return self._records.get(key)

    def records(self) -> list[RunRecord]:
        return list(self._records.values())

    def ok_records(self, fingerprint: Optional[str] = None) -> list[RunRecord]:
        out = [r for r in self._records.values() if r.status == "ok"]
        if fingerprint is not None:
            out = [r for r in out if r.fingerprint == fingerprint]
        return out


@dataclass
class CellStat:
    mean: float
    sd: float
    n: int


@dataclass
class ResultTable:
    """(backbone, strategy, shots) -> metric -> CellStat."""

    cells: dict[tuple[str, str, int], dict[str, CellStat]] = field(default_factory=dict)

    def get(self, backbone: str, strategy: str, shots: int, metric: str) -> Optional[CellStat]:
        return self.cells.get((backbone, strategy, shots), {}).get(metric)


def aggregate(records: Sequence[RunRecord], strategies: Optional[Sequence[str]] = None) -> ResultTable:
    """Mean and sample SD (n-1 denominator) per metric per grid cell.

    The per-backbone zero-shot record is copied into every strategy's shot-0
    cell so rendered rows repeat it, matching how results tables are laid out.
    """
    groups: dict[tuple[str, str, int], list[RunRecord]] = {}
    for rec in records:
        if rec.status != "ok" or rec.metrics is None:
            continue
        groups.setdefault((rec.backbone, rec.strategy, rec.shots), []).append(rec)

    table = ResultTable()
    for key, recs in groups.items():
        cell: dict[str, CellStat] = {}
        for metric in METRIC_KEYS:
            values = np.array([getattr(r.metrics, metric) for r in recs], dtype=np.float64)
            sd = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
            cell[metric] = CellStat(mean=float(np.mean(values)), sd=sd, n=values.size)
        for metric in ("alignment", "similarity_gap", "intra_class_distance", "silhouette"):
            values = [
                r.diagnostics[metric]
                for r in recs
                if r.diagnostics and metric in r.diagnostics and np.isfinite(r.diagnostics[metric])
            ]
            if values:
                arr = np.array(values, dtype=np.float64)
                sd = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
                cell[metric] = CellStat(mean=float(np.mean(arr)), sd=sd, n=arr.size)
        table.cells[key] = cell

    # fan the stored zero-shot cell out to each strategy row
    if strategies is None:
        strategies = sorted({s for (_, s, _) in table.cells if s != ZEROSHOT})
    for (backbone, strategy, shots) in list(table.cells):
        if strategy == ZEROSHOT and shots == 0:
            for s in strategies:
                table.cells.setdefault((backbone, s, 0), table.cells[(backbone, ZEROSHOT, 0)])
    return table


@dataclass
class GridResult:
    table: ResultTable
    records: list[RunRecord]
    computed: int = 0
    skipped: int = 0
    failed: int = 0


def _cell_seed(master_seed: int, backbone: str, strategy: str, shots: int, run_id: int) -> int:
    blob = f"{master_seed}|{backbone}|{strategy}|{shots}|{run_id}".encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:4], "big")


def _zero_shot_fingerprint(config: ExperimentConfig, backbone_spec: dict) -> str:
    """Zero-shot depends only on the backbone, prompts, and projection, so the
    baseline record survives training-config changes."""
    canon = {
        "backbone": backbone_spec,
        "classes": config.classes,
        "prompt_template": config.prompt_template,
        "projection": asdict(config.projection),
    }
    return hashlib.sha256(json.dumps(canon, sort_keys=True).encode()).hexdigest()[:16]


class _PatchCache:
    def __init__(self, manifest: DatasetManifest, root: Optional[str]):
        self.manifest = manifest
        self.root = root
        self._cache: dict[str, SlidePatch] = {}

    def get(self, ids: Sequence[str]) -> list[SlidePatch]:
        missing = [pid for pid in ids if pid not in self._cache]
        if missing:
            for patch in load_patches(self.manifest, missing, root=self.root):
                self._cache[patch.patch_id] = patch
        return [self._cache[pid] for pid in ids]


def _evaluate_adapted(
    adapted: AdaptedModel,
    val_patches: Sequence[SlidePatch],
    val_labels: np.ndarray,
    prompts: PromptSet,
    classes: Sequence[str],
) -> tuple[EvalResult, EmbeddingBatch, EmbeddingBatch, np.ndarray]:
    """Metrics + image/text embedding batches for one adapted model."""
    backbone = adapted.backbone
    image_embs = encode_images(backbone, val_patches, classes=classes)
    text_embs = encode_prompts(backbone, prompts)
    if adapted.strategy == "classifier":
        adapted.eval_mode()
        with torch.no_grad():
            px = torch.stack([backbone.preprocess(p.pixels) for p in val_patches])
            logits = adapted.head(backbone.encode_image_features(px))
            probs = torch.softmax(logits, dim=1).double().numpy()
    else:
        probs, _ = classify(image_embs, text_embs, backbone.logit_scale_value())
    result = evaluate_predictions(probs, val_labels, classes)
    return result, image_embs, text_embs, probs


def run_grid(config: ExperimentConfig, resume: bool = True) -> GridResult:
    """Execute the whole grid; idempotent across reruns of the same config."""
    manifest = load_manifest(config.manifest_path)
    if manifest.classes != list(config.classes):
        raise ConfigurationError(
            f"manifest classes {manifest.classes} differ from config classes {config.classes}"
        )
    split = SplitManifest.load(config.split_path)
    data_root = config.data_root or str(Path(config.manifest_path).parent)
    prompts = build_prompts(config.classes, config.prompt_template)
    fingerprint = config.fingerprint()

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = RecordStore(out_dir / "records.jsonl")

    plans = plan_runs(
        manifest,
        split,
        n_runs=config.n_runs,
        superset_size=config.superset_size,
        master_seed=config.master_seed,
    )
    val_pids = validation_ids(manifest, split)
    if not val_pids:
        raise ValidationError("validation WSI set contributes no patches")
    for plan in plans:
        train_pids = [pid for ids in plan.superset.values() for pid in ids]
        violation = check_separation(train_pids, split, val_pids, manifest)
        if violation is not None:
            raise ValidationError(f"WSI leakage in plan {plan.run_id}: {violation}")

    cache = _PatchCache(manifest, data_root)
    val_patches = cache.get(val_pids)
    class_index = {c: i for i, c in enumerate(config.classes)}
    val_labels = np.array([class_index[p.label] for p in val_patches], dtype=np.int64)

    result = GridResult(table=ResultTable(), records=[])
    grid_keys: list[tuple] = []

    for spec in config.backbones:
        spec = dict(spec)
        name = spec.pop("name")
        base = build_backbone(name, **spec)

        if 0 in config.shots:
            zs_fingerprint = _zero_shot_fingerprint(config, {"name": name, **spec})
            grid_keys.append((name, ZEROSHOT, 0, 0))
            _run_zero_shot(
                base, name, config, prompts, val_patches, val_labels, store,
                zs_fingerprint, result, resume,
            )

        for strategy in config.strategies:
            for k in config.shots:
                if k == 0:
                    continue
                for plan in plans:
                    key = (name, strategy, k, plan.run_id)
                    grid_keys.append(key)
                    existing = store.get(key)
                    if (
                        resume
                        and existing is not None
                        and existing.status == "ok"
                        and existing.fingerprint == fingerprint
                    ):
                        result.skipped += 1
                        continue
                    record = _run_cell(
                        base, name, strategy, k, plan, config, prompts, cache,
                        val_patches, val_labels, fingerprint,
                    )
                    store.append(record)
                    if record.status == "ok":
                        result.computed += 1
                    else:
                        result.failed += 1
                        logger.warning("cell %s failed: %s", key, record.error)

    result.records = [
        rec for key in grid_keys if (rec := store.get(key)) is not None and rec.status == "ok"
    ]
    result.table = aggregate(result.records, strategies=config.strategies)
    return result


def _run_zero_shot(
    base: DualEncoderBackbone,
    name: str,
    config: ExperimentConfig,
    prompts: PromptSet,
    val_patches: Sequence[SlidePatch],
    val_labels: np.ndarray,
    store: RecordStore,
    fingerprint: str,
    result: GridResult,
    resume: bool = True,
) -> None:
    key = (name, ZEROSHOT, 0, 0)
    existing = store.get(key)
    if (
        resume
        and existing is not None
        and existing.status == "ok"
        and existing.fingerprint == fingerprint
    ):
        result.skipped += 1
        return
    t0 = time.perf_counter()
    image_embs = encode_images(base, val_patches, classes=config.classes)
    text_embs = encode_prompts(base, prompts)
    probs, _ = classify(image_embs, text_embs, base.logit_scale_value())
    metrics = evaluate_predictions(probs, val_labels, config.classes)
    emb_dir = Path(config.out_dir) / "emb" / f"{name}__{ZEROSHOT}__s0" / "run0"
    save_embeddings(image_embs, emb_dir / "images")
    save_embeddings(text_embs, emb_dir / "texts")
    provenance = {
        "backbone": name, "strategy": ZEROSHOT, "shots": 0, "run_id": 0,
        "text_used_in_adaptation": False,
    }
    diag = compute_diagnostics(image_embs, text_embs, config.projection, provenance=provenance)
    record = RunRecord(
        backbone=name,
        strategy=ZEROSHOT,
        shots=0,
        run_id=0,
        seed=config.master_seed,
        metrics=metrics,
        diagnostics=diag.to_json(),
        history=None,
        wall_time=time.perf_counter() - t0,
        fingerprint=fingerprint,
        emb_dir=str(emb_dir),
    )
    store.append(record)
    result.computed += 1


def _run_cell(
    base: DualEncoderBackbone,
    name: str,
    strategy: str,
    k: int,
    plan: ShotPlan,
    config: ExperimentConfig,
    prompts: PromptSet,
    cache: _PatchCache,
    val_patches: Sequence[SlidePatch],
    val_labels: np.ndarray,
    fingerprint: str,
    delta_path: Optional[Path] = None,
) -> RunRecord:
    t0 = time.perf_counter()
    cell_seed = _cell_seed(config.master_seed, name, strategy, k, plan.run_id)
    try:
        model = copy.deepcopy(base)
        cfg = config.adaptation_for(strategy)
        adapted = apply_strategy(model, cfg, len(config.classes), init_seed=cell_seed)
        subset = shot_subset(plan, k)
        shots_patches = {cls: cache.get(ids) for cls, ids in subset.items()}
        schedule = config.schedule_for(strategy)
        history = adapt.train(
            adapted, shots_patches, prompts, schedule, val_patches, schedule_seed=cell_seed
        )
        if delta_path is not None:
            delta_path.parent.mkdir(parents=True, exist_ok=True)
            adapt.save_delta(adapted, delta_path, fingerprint=fingerprint)
        metrics, image_embs, text_embs, _ = _evaluate_adapted(
            adapted, val_patches, val_labels, prompts, config.classes
        )
        emb_dir = Path(config.out_dir) / "emb" / f"{name}__{strategy}__s{k}" / f"run{plan.run_id}"
        save_embeddings(image_embs, emb_dir / "images")
        save_embeddings(text_embs, emb_dir / "texts")
        provenance = {
            "backbone": name, "strategy": strategy, "shots": k, "run_id": plan.run_id,
            "text_used_in_adaptation": strategy != "classifier",
        }
        diag = compute_diagnostics(image_embs, text_embs, config.projection, provenance=provenance)
        return RunRecord(
            backbone=name,
            strategy=strategy,
            shots=k,
            run_id=plan.run_id,
            seed=plan.seed,
            metrics=metrics,
            diagnostics=diag.to_json(),
            history=history,
            wall_time=time.perf_counter() - t0,
            fingerprint=fingerprint,
            emb_dir=str(emb_dir),
        )
    except Exception as exc:  # grid keeps going; the record carries the error
        return RunRecord(
            backbone=name,
            strategy=strategy,
            shots=k,
            run_id=plan.run_id,
            seed=plan.seed,
            status="error",
            wall_time=time.perf_counter() - t0,
            fingerprint=fingerprint,
            error=f"{type(exc).__name__}: {exc}",
        )
