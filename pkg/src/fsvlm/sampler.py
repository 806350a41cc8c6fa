"""Deterministic nested few-shot sampling with strict WSI-level separation.

Every run gets a per-class 32-item superset; smaller shot counts are prefixes
of it, so the 4-shot set contains the 2-shot set plus two extra images per
class. Runs take distinct round-robin slices of the (seed-shuffled) per-class
pool so that supersets are pairwise disjoint whenever the pool is large
enough, and wrap around otherwise.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import DatasetManifest
from .errors import InsufficientDataError, ValidationError

DEFAULT_SUPERSET_SIZE = 32
DEFAULT_N_RUNS = 10
SHOT_LEVELS = (0, 1, 2, 4, 8, 16, 32)


@dataclass(frozen=True)
class SplitManifest:
    """Disjoint train/validation slide id sets."""

    train_wsi_ids: frozenset[str]
    val_wsi_ids: frozenset[str]

    def __post_init__(self) -> None:
        overlap = self.train_wsi_ids & self.val_wsi_ids
        if overlap:
            raise ValidationError(f"train/val WSI sets overlap: {sorted(overlap)}")

    @classmethod
    def from_lists(cls, train: Iterable[str], val: Iterable[str]) -> "SplitManifest":
        return cls(frozenset(train), frozenset(val))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(
                {"train_wsi_ids": sorted(self.train_wsi_ids), "val_wsi_ids": sorted(self.val_wsi_ids)},
                indent=2,
            )
            + "\n"
        )

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        rec = json.loads(Path(path).read_text())
        return cls.from_lists(rec["train_wsi_ids"], rec["val_wsi_ids"])


@dataclass(frozen=True)
class ShotPlan:
    """One run's per-class ordered superset of training patch ids."""

    run_id: int
    seed: int
    superset: dict[str, tuple[str, ...]]  # class -> ordered patch ids, len == S

    @property
    def superset_size(self) -> int:
        return len(next(iter(self.superset.values())))


@dataclass(frozen=True)
class SeparationViolation:
    """First patch found on the wrong side of the WSI split."""

    patch_id: str
    wsi_id: str
    reason: str


def _class_order_seed(master_seed: int, class_name: str) -> int:
    digest = hashlib.sha256(f"{master_seed}|{class_name}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _ordered_pool(ids: Sequence[str], master_seed: int, class_name: str) -> list[str]:
    # Sort first so the shuffle is independent of manifest insertion order.
    rng = np.random.default_rng(_class_order_seed(master_seed, class_name))
    ordered = sorted(ids)
    perm = rng.permutation(len(ordered))
    return [ordered[i] for i in perm]


def plan_runs(
    manifest: DatasetManifest,
    split: SplitManifest,
    n_runs: int = DEFAULT_N_RUNS,
    superset_size: int = DEFAULT_SUPERSET_SIZE,
    master_seed: int = 0,
) -> list[ShotPlan]:
    """Build one ShotPlan per run.

    For each class the training pool (patches from train WSIs) is put in a
    deterministic seed-keyed order; run ``r`` takes ``superset_size`` distinct
    items starting at offset ``(r * superset_size) mod pool_size``, walking
    forward and wrapping around the pool as needed.
    """
    pools: dict[str, list[str]] = {}
    for cls in manifest.classes:
        ids = [
            p.patch_id
            for p in manifest.patches
            if p.label == cls and p.wsi_id in split.train_wsi_ids
        ]
        if len(ids) < superset_size:
            raise InsufficientDataError(
                f"class {cls!r} has {len(ids)} training patches, "
                f"needs at least {superset_size}"
            )
        pools[cls] = _ordered_pool(ids, master_seed, cls)

    plans: list[ShotPlan] = []
    for r in range(n_runs):
        superset: dict[str, tuple[str, ...]] = {}
        for cls in manifest.classes:
            pool = pools[cls]
            n = len(pool)
            start = (r * superset_size) % n
            picked: list[str] = []
            offset = 0
            while len(picked) < superset_size:
                candidate = pool[(start + offset) % n]
                offset += 1
                if candidate in picked:
                    continue  # full wrap: skip items this run already took
                picked.append(candidate)
            superset[cls] = tuple(picked)
        plans.append(ShotPlan(run_id=r, seed=master_seed + r, superset=superset))
    return plans


def shot_subset(plan: ShotPlan, k: int) -> dict[str, list[str]]:
    """First ``k`` ids of each class's superset; k=0 gives empty lists."""
    size = plan.superset_size
    if k < 0 or k > size:
        raise ValueError(f"shots k={k} outside [0, {size}]")
    return {cls: list(ids[:k]) for cls, ids in plan.superset.items()}


def check_separation(
    train_ids: Iterable[str],
    split: SplitManifest,
    val_ids: Iterable[str],
    manifest: DatasetManifest,
) -> SeparationViolation | None:
    """Verify no leakage across the WSI split; return the first violation.

    Training patches must come from train WSIs and validation patches from
    validation WSIs (the split itself is disjoint by construction). A patch id
    that does not resolve in the manifest is a lookup error.
    """
    index = manifest.by_id()

    def wsi_of(pid: str) -> str:
        if pid not in index:
            raise ValidationError(f"unresolvable patch id {pid!r}")
        return index[pid].wsi_id

    for pid in train_ids:
        wsi = wsi_of(pid)
        if wsi not in split.train_wsi_ids:
            return SeparationViolation(pid, wsi, "training patch from non-training WSI")
    for pid in val_ids:
        wsi = wsi_of(pid)
        if wsi in split.train_wsi_ids:
            return SeparationViolation(pid, wsi, "validation patch from training WSI")
    return None


def validation_ids(manifest: DatasetManifest, split: SplitManifest) -> list[str]:
    """All patches from validation WSIs, in manifest order."""
    return [p.patch_id for p in manifest.patches if p.wsi_id in split.val_wsi_ids]


def save_plans(plans: Sequence[ShotPlan], path: str | Path) -> None:
    """One JSONL record per (run_id, class, rank, patch_id)."""
    lines = []
    for plan in plans:
        for cls, ids in plan.superset.items():
            for rank, pid in enumerate(ids):
                lines.append(
                    json.dumps(
                        {
                            "run_id": plan.run_id,
                            "seed": plan.seed,
                            "class": cls,
                            "rank": rank,
                            "patch_id": pid,
                        }
                    )
                )
    Path(path).write_text("\n".join(lines) + "\n")


def load_plans(path: str | Path) -> list[ShotPlan]:
    by_run: dict[int, dict] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        run = by_run.setdefault(rec["run_id"], {"seed": rec["seed"], "classes": {}})
        run["classes"].setdefault(rec["class"], []).append((rec["rank"], rec["patch_id"]))
    plans = []
    for run_id in sorted(by_run):
        run = by_run[run_id]
        superset = {
            cls: tuple(pid for _, pid in sorted(entries))
            for cls, entries in run["classes"].items()
        }
        plans.append(ShotPlan(run_id=run_id, seed=run["seed"], superset=superset))
    return plans
