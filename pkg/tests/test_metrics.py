import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsvlm.metrics import (
    accuracy,
    binary_auc,
    evaluate_predictions,
    export_roc,
    macro_auc,
    macro_f1,
    roc_points,
)


def pairwise_auc_oracle(scores, labels01):
    """Brute-force Mann-Whitney: count positive-over-negative wins, ties half."""
    pos = [s for s, l in zip(scores, labels01) if l == 1]
    neg = [s for s, l in zip(scores, labels01) if l == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


class TestAccuracy:
    def test_perfect(self):
        assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0

    def test_all_wrong(self):
        assert accuracy([0, 0, 0], [1, 2, 3]) == 0.0

    def test_three_of_five(self):
        assert accuracy([0, 1, 2, 3, 4], [0, 1, 2, 0, 0]) == pytest.approx(0.6)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            accuracy([], [])


class TestMacroF1:
    def test_perfect_all_classes(self):
        assert macro_f1([0, 1, 2], [0, 1, 2], 3) == 1.0

    def test_symmetric_binary_case(self):
        # class 0: TP=1 FP=1 FN=1 -> F1 0.5; class 1 symmetric -> macro 0.5
        preds = [0, 0, 1, 1]
        labels = [0, 1, 0, 1]
        assert macro_f1(preds, labels, 2) == pytest.approx(0.5)

    def test_absent_class_contributes_zero(self):
        # class 4 never appears among 5 classes: its F1 counts as 0
        preds = [0, 1, 2, 3]
        labels = [0, 1, 2, 3]
        assert macro_f1(preds, labels, 5) == pytest.approx(4 / 5)


class TestAuc:
    def test_perfect_separation(self):
        macro, per_class = macro_auc(
            np.array([[0.9, 0.1], [0.8, 0.2], [0.2, 0.8], [0.1, 0.9]]), [0, 0, 1, 1]
        )
        assert macro == 1.0
        assert per_class == {0: 1.0, 1: 1.0}

    def test_identical_scores_give_half(self):
        probs = np.full((6, 2), 0.5)
        macro, per_class = macro_auc(probs, [0, 1, 0, 1, 0, 1])
        assert macro == pytest.approx(0.5)
        assert all(v == pytest.approx(0.5) for v in per_class.values())

    def test_derived_binary_example(self):
        # pairs: (0.9,0.8) win, (0.9,0.1) win, (0.3,0.8) loss, (0.3,0.1) win
        assert binary_auc([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0]) == pytest.approx(0.75)

    def test_single_class_undefined(self):
        with pytest.raises(ValueError):
            macro_auc(np.array([[0.5, 0.5], [0.4, 0.6]]), [0, 0])

    def test_class_lacking_negatives_excluded(self):
        probs = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.2, 0.7]])
        macro, per_class = macro_auc(probs, [0, 1, 0])
        assert set(per_class) == {0, 1}  # class 2 has no positives

    @settings(max_examples=80, deadline=None)
    @given(
        n=st.integers(4, 40),
        seed=st.integers(0, 10_000),
        coarse=st.booleans(),
    )
    def test_matches_pairwise_oracle(self, n, seed, coarse):
        rng = np.random.default_rng(seed)
        scores = rng.integers(0, 5, n) / 4.0 if coarse else rng.random(n)
        labels = rng.integers(0, 2, n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        assert binary_auc(scores, labels) == pytest.approx(
            pairwise_auc_oracle(scores, labels), abs=1e-12
        )

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_invariant_to_increasing_transform(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.random(30)
        labels = rng.integers(0, 2, 30)
        if labels.sum() in (0, 30):
            labels[0] = 1 - labels[0]
        assert binary_auc(scores, labels) == pytest.approx(
            binary_auc(np.exp(3 * scores), labels), abs=1e-12
        )

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_invariant_to_permutation(self, seed):
        rng = np.random.default_rng(seed)
        probs = rng.dirichlet(np.ones(4), size=25)
        labels = rng.integers(0, 4, 25)
        perm = rng.permutation(25)
        try:
            m1, _ = macro_auc(probs, labels)
            m2, _ = macro_auc(probs[perm], labels[perm])
        except ValueError:
            return
        assert m1 == pytest.approx(m2, abs=1e-12)


class TestRocPoints:
    def test_perfect_separation_passes_through_corner(self):
        pts = roc_points([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert (0.0, 1.0) in pts
        assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)

    def test_all_tied_is_diagonal(self):
        pts = roc_points([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0])
        assert pts == [(0.0, 0.0), (1.0, 1.0)]

    def test_derived_sweep(self):
        pts = roc_points([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0])
        assert pts == [(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]

    def test_monotone_nondecreasing(self):
        rng = np.random.default_rng(0)
        scores = rng.random(50)
        labels = rng.integers(0, 2, 50)
        labels[0], labels[1] = 0, 1
        pts = np.array(roc_points(scores, labels))
        assert np.all(np.diff(pts[:, 0]) >= 0)
        assert np.all(np.diff(pts[:, 1]) >= 0)

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(4, 60), seed=st.integers(0, 10_000), coarse=st.booleans())
    def test_trapezoid_area_equals_auc(self, n, seed, coarse):
        rng = np.random.default_rng(seed)
        scores = rng.integers(0, 4, n) / 3.0 if coarse else rng.random(n)
        labels = rng.integers(0, 2, n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        pts = np.array(roc_points(scores, labels))
        area = np.trapezoid(pts[:, 1], pts[:, 0])
        assert area == pytest.approx(binary_auc(scores, labels), abs=1e-9)


def test_evaluate_predictions_bundle_and_export(tmp_path):
    rng = np.random.default_rng(1)
    probs = rng.dirichlet(np.ones(3), size=30)
    labels = rng.integers(0, 3, 30)
    result = evaluate_predictions(probs, labels, ["a", "b", "c"])
    assert 0.0 <= result.accuracy <= 1.0
    assert 0.0 <= result.macro_f1 <= 1.0
    assert 0.0 <= result.macro_auc <= 1.0
    for cls, pts in result.roc.items():
        arr = np.array(pts)
        area = np.trapezoid(arr[:, 1], arr[:, 0])
        assert area == pytest.approx(result.per_class_auc[cls], abs=1e-9)
    out = tmp_path / "roc.jsonl"
    export_roc(result, out)
    assert out.read_text().count('"class"') >= len(result.roc)
