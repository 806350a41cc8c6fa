import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsvlm.corpus import DatasetManifest, PatchRecord
from fsvlm.errors import InsufficientDataError, ValidationError
from fsvlm.sampler import (
    SplitManifest,
    check_separation,
    load_plans,
    plan_runs,
    save_plans,
    shot_subset,
    validation_ids,
)


def make_manifest(pool_sizes: dict[str, int], val_per_class: int = 2) -> tuple[DatasetManifest, SplitManifest]:
    """Train patches live on wsi 'train0'/'train1', validation on 'val0'."""
    patches = []
    for cls, n in pool_sizes.items():
        for i in range(n):
            wsi = f"train{i % 2}"
            patches.append(PatchRecord(wsi, f"{cls}-{i:03d}", cls, f"{wsi}__{cls}-{i:03d}.png"))
        for i in range(val_per_class):
            patches.append(PatchRecord("val0", f"{cls}-v{i}", cls, f"val0__{cls}-v{i}.png"))
    manifest = DatasetManifest(patches=patches, classes=sorted(pool_sizes))
    split = SplitManifest.from_lists(["train0", "train1"], ["val0"])
    return manifest, split


class TestPlanRuns:
    def test_disjoint_slices_when_pool_is_large(self):
        # 64 items per class, two runs of 32: slices must partition the pool
        manifest, split = make_manifest({"a": 64, "b": 64})
        plans = plan_runs(manifest, split, n_runs=2, superset_size=32, master_seed=5)
        for cls in ("a", "b"):
            run0 = set(plans[0].superset[cls])
            run1 = set(plans[1].superset[cls])
            assert len(run0) == len(run1) == 32
            assert run0.isdisjoint(run1)
            assert run0 | run1 == {p for p in run0 | run1}  # all from the pool
            assert len(run0 | run1) == 64

    def test_single_run_takes_prefix_of_pool(self):
        manifest, split = make_manifest({"a": 40})
        plans = plan_runs(manifest, split, n_runs=1, superset_size=32, master_seed=5)
        assert len(plans) == 1
        assert len(plans[0].superset["a"]) == 32

    def test_wraparound_reuses_exactly_the_overlap(self):
        # pool of 40: run 1 starts at index 32, takes the 8 unused items, then
        # wraps and reuses 24 items already taken by run 0
        manifest, split = make_manifest({"a": 40})
        plans = plan_runs(manifest, split, n_runs=2, superset_size=32, master_seed=5)
        run0 = plans[0].superset["a"]
        run1 = plans[1].superset["a"]
        assert len(set(run0) & set(run1)) == 24
        # run 1 begins with the 8 items run 0 never touched
        unused = [pid for pid in run1 if pid not in set(run0)]
        assert len(unused) == 8
        assert list(run1[:8]) == unused

    def test_plan_seeds(self):
        manifest, split = make_manifest({"a": 32})
        plans = plan_runs(manifest, split, n_runs=3, superset_size=32, master_seed=100)
        assert [p.seed for p in plans] == [100, 101, 102]

    def test_insufficient_pool_names_class(self):
        manifest, split = make_manifest({"a": 32, "small": 10})
        with pytest.raises(InsufficientDataError, match="small"):
            plan_runs(manifest, split, n_runs=1, superset_size=32)

    def test_determinism_and_insertion_order_independence(self):
        manifest, split = make_manifest({"a": 48, "b": 48})
        plans1 = plan_runs(manifest, split, n_runs=4, superset_size=32, master_seed=9)
        plans2 = plan_runs(manifest, split, n_runs=4, superset_size=32, master_seed=9)
        assert plans1 == plans2
        shuffled = DatasetManifest(patches=list(reversed(manifest.patches)), classes=manifest.classes)
        plans3 = plan_runs(shuffled, split, n_runs=4, superset_size=32, master_seed=9)
        assert plans1 == plans3

    def test_different_seed_changes_plans(self):
        manifest, split = make_manifest({"a": 48})
        p1 = plan_runs(manifest, split, n_runs=1, superset_size=32, master_seed=0)
        p2 = plan_runs(manifest, split, n_runs=1, superset_size=32, master_seed=1)
        assert p1[0].superset != p2[0].superset


def _shared_plan():
    manifest, split = make_manifest({"a": 40, "b": 40})
    return plan_runs(manifest, split, n_runs=1, superset_size=32, master_seed=3)[0]


class TestShotSubset:
    @pytest.fixture()
    def plan(self):
        return _shared_plan()

    def test_zero_shot_is_empty(self, plan):
        subset = shot_subset(plan, 0)
        assert all(v == [] for v in subset.values())

    def test_prefix_nesting(self, plan):
        two = shot_subset(plan, 2)
        four = shot_subset(plan, 4)
        for cls in two:
            assert four[cls][:2] == two[cls]
            assert len(set(four[cls]) - set(two[cls])) == 2

    def test_full_superset(self, plan):
        assert shot_subset(plan, 32) == {c: list(v) for c, v in plan.superset.items()}

    def test_out_of_range(self, plan):
        with pytest.raises(ValueError):
            shot_subset(plan, 33)
        with pytest.raises(ValueError):
            shot_subset(plan, -1)

    @settings(max_examples=30, deadline=None)
    @given(k1=st.integers(0, 32), k2=st.integers(0, 32))
    def test_any_pair_nests(self, k1, k2):
        plan = _shared_plan()
        lo, hi = sorted((k1, k2))
        small, big = shot_subset(plan, lo), shot_subset(plan, hi)
        for cls in small:
            assert big[cls][:lo] == small[cls]
            assert len(small[cls]) == lo and len(big[cls]) == hi


class TestSeparation:
    def test_disjoint_ok(self):
        manifest, split = make_manifest({"a": 32})
        plans = plan_runs(manifest, split, n_runs=1, superset_size=32)
        train_ids = [pid for ids in plans[0].superset.values() for pid in ids]
        val = validation_ids(manifest, split)
        assert check_separation(train_ids, split, val, manifest) is None

    def test_violation_names_patch_and_wsi(self):
        manifest, split = make_manifest({"a": 32})
        train_ids = [p.patch_id for p in manifest.patches if p.wsi_id == "train0"][:4]
        # pretend a train-WSI patch is in the validation set
        bad_val = [train_ids[0]]
        violation = check_separation([], split, bad_val, manifest)
        assert violation is not None
        assert violation.patch_id == train_ids[0]
        assert violation.wsi_id == "train0"

    def test_empty_training_set_ok(self):
        manifest, split = make_manifest({"a": 32})
        val = validation_ids(manifest, split)
        assert check_separation([], split, val, manifest) is None

    def test_unresolvable_id(self):
        manifest, split = make_manifest({"a": 32})
        with pytest.raises(ValidationError, match="unresolvable"):
            check_separation(["nope"], split, [], manifest)

    def test_overlapping_split_rejected(self):
        with pytest.raises(ValidationError):
            SplitManifest.from_lists(["w1", "w2"], ["w2"])


def test_plan_serialization_roundtrip(tmp_path):
    manifest, split = make_manifest({"a": 40, "b": 40})
    plans = plan_runs(manifest, split, n_runs=3, superset_size=32, master_seed=11)
    path = tmp_path / "plans.jsonl"
    save_plans(plans, path)
    assert load_plans(path) == plans
