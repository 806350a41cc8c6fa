import numpy as np
import pytest

from fsvlm.diagnostics import (
    alignment,
    compute_diagnostics,
    export_density_figure,
    intra_class_distance,
    silhouette_cosine,
    similarity_gap,
)
from fsvlm.encoder import EmbeddingBatch
from fsvlm.errors import ValidationError
from fsvlm.projection import ProjectionParams


def unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def image_batch(vectors, labels):
    vectors = unit_rows(vectors)
    return EmbeddingBatch(
        vectors=vectors,
        modality="image",
        ids=[f"p{i}" for i in range(len(vectors))],
        labels=np.asarray(labels),
    )


def text_batch(vectors):
    vectors = unit_rows(vectors)
    return EmbeddingBatch(
        vectors=vectors,
        modality="text",
        ids=[f"c{i}" for i in range(len(vectors))],
        labels=np.arange(len(vectors)),
    )


def random_unit(rng, n, d):
    return unit_rows(rng.normal(size=(n, d)))


# --- brute-force oracles (independent double loops) ---

def alignment_oracle(img, txt, labels):
    total = 0.0
    for i in range(len(img)):
        a, b = img[i], txt[labels[i]]
        total += float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return total / len(img)


def gap_oracle(img, txt, labels):
    n = len(img)
    pos = alignment_oracle(img, txt, labels)
    neg = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            a, b = img[i], txt[labels[j]]
            neg += float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return pos - neg / (n * (n - 1))


def icd_oracle(points, labels):
    vals = []
    for c in np.unique(labels):
        pts = points[labels == c]
        if len(pts) < 2:
            continue
        total, count = 0.0, 0
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                total += float(np.linalg.norm(pts[i] - pts[j]))
                count += 1
        vals.append(total / count)
    return float(np.mean(vals))


def silhouette_oracle(x, labels):
    n = len(x)

    def d_cos(a, b):
        return 1.0 - float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))

    scores = []
    for i in range(n):
        same = [j for j in range(n) if labels[j] == labels[i] and j != i]
        if not same:
            scores.append(0.0)
            continue
        a_i = np.mean([d_cos(x[i], x[j]) for j in same])
        b_i = min(
            np.mean([d_cos(x[i], x[j]) for j in range(n) if labels[j] == c])
            for c in np.unique(labels)
            if c != labels[i]
        )
        scores.append(0.0 if max(a_i, b_i) == 0 else (b_i - a_i) / max(a_i, b_i))
    return float(np.mean(scores))


class TestAlignment:
    def test_images_equal_to_class_text(self):
        txt = np.eye(3)
        labels = [0, 1, 2, 0]
        img = txt[labels]
        assert alignment(image_batch(img, labels), text_batch(txt)) == pytest.approx(1.0)

    def test_orthogonal(self):
        txt = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
        img = np.array([[0, 0, 1.0, 0], [0, 0, 0, 1.0]])
        assert alignment(image_batch(img, [0, 1]), text_batch(txt)) == pytest.approx(0.0)

    def test_mixed_cosines_average(self):
        # three samples with pairwise cosines (1, 0, -1) average to zero
        txt = np.array([[1.0, 0], [0, 1.0], [1.0, 0]])
        img = np.array([[1.0, 0], [1.0, 0], [-1.0, 0]])
        assert alignment(image_batch(img, [0, 1, 2]), text_batch(txt)) == pytest.approx(0.0)

    def test_missing_class_embedding(self):
        txt = np.eye(2)
        img = np.eye(3)
        with pytest.raises(ValidationError):
            alignment(image_batch(img, [0, 1, 2]), text_batch(txt))

    def test_oracle_equality(self):
        rng = np.random.default_rng(0)
        img = random_unit(rng, 50, 16)
        txt = random_unit(rng, 5, 16)
        labels = rng.integers(0, 5, 50)
        assert alignment(image_batch(img, labels), text_batch(txt)) == pytest.approx(
            alignment_oracle(img, txt, labels), abs=1e-10
        )


class TestSimilarityGap:
    def test_identical_embeddings_zero_gap(self):
        v = np.array([[1.0, 0.0]])
        img = np.repeat(v, 4, axis=0)
        txt = np.repeat(v, 2, axis=0)
        labels = [0, 1, 0, 1]
        assert similarity_gap(image_batch(img, labels), text_batch(txt)) == pytest.approx(0.0)

    def test_two_orthogonal_pairs(self):
        txt = np.array([[1.0, 0.0], [0.0, 1.0]])
        img = txt.copy()
        got = similarity_gap(image_batch(img, [0, 1]), text_batch(txt))
        assert got == pytest.approx(1.0)

    def test_oracle_equality_20_points(self):
        rng = np.random.default_rng(1)
        img = random_unit(rng, 20, 8)
        txt = random_unit(rng, 5, 8)
        labels = rng.integers(0, 5, 20)
        assert similarity_gap(image_batch(img, labels), text_batch(txt)) == pytest.approx(
            gap_oracle(img, txt, labels), abs=1e-12
        )

    def test_oracle_equality_200_points(self):
        rng = np.random.default_rng(2)
        img = random_unit(rng, 200, 12)
        txt = random_unit(rng, 5, 12)
        labels = rng.integers(0, 5, 200)
        assert similarity_gap(image_batch(img, labels), text_batch(txt)) == pytest.approx(
            gap_oracle(img, txt, labels), abs=1e-12
        )

    def test_strict_mode_excludes_same_class_pairs(self):
        rng = np.random.default_rng(3)
        img = random_unit(rng, 12, 6)
        txt = random_unit(rng, 3, 6)
        labels = rng.integers(0, 3, 12)
        strict = similarity_gap(image_batch(img, labels), text_batch(txt), strict=True)
        # oracle with same-class j excluded
        n = 12
        neg, cnt = 0.0, 0
        for i in range(n):
            for j in range(n):
                if i == j or labels[j] == labels[i]:
                    continue
                neg += float(img[i] @ txt[labels[j]])
                cnt += 1
        expected = alignment_oracle(img, txt, labels) - neg / cnt
        assert strict == pytest.approx(expected, abs=1e-12)


class TestRotationInvariance:
    def test_alignment_and_gap_invariant(self):
        rng = np.random.default_rng(4)
        img = random_unit(rng, 40, 16)
        txt = random_unit(rng, 5, 16)
        labels = rng.integers(0, 5, 40)
        q, _ = np.linalg.qr(rng.normal(size=(16, 16)))
        img_r = unit_rows(img @ q)
        txt_r = unit_rows(txt @ q)
        a1 = alignment(image_batch(img, labels), text_batch(txt))
        a2 = alignment(image_batch(img_r, labels), text_batch(txt_r))
        g1 = similarity_gap(image_batch(img, labels), text_batch(txt))
        g2 = similarity_gap(image_batch(img_r, labels), text_batch(txt_r))
        assert a1 == pytest.approx(a2, abs=1e-9)
        assert g1 == pytest.approx(g2, abs=1e-9)


class TestIntraClassDistance:
    def test_coincident_points_zero(self):
        pts = np.zeros((6, 2))
        assert intra_class_distance(pts, [0, 0, 0, 1, 1, 1]) == 0.0

    def test_two_classes_average(self):
        pts = np.array([[0.0, 0.0], [3.0, 0.0], [10.0, 0.0], [10.0, 1.0]])
        assert intra_class_distance(pts, [0, 0, 1, 1]) == pytest.approx(2.0)

    def test_singleton_class_skipped(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]])
        assert intra_class_distance(pts, [0, 0, 1]) == pytest.approx(1.0)

    def test_all_singletons_undefined(self):
        with pytest.raises(ValidationError):
            intra_class_distance(np.eye(2), [0, 1])

    def test_oracle_equality(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(30, 2)) * 5
        labels = rng.integers(0, 5, 30)
        assert intra_class_distance(pts, labels) == pytest.approx(
            icd_oracle(pts, labels), abs=1e-12
        )

    def test_translation_rotation_and_scale_behavior(self):
        rng = np.random.default_rng(6)
        pts = rng.normal(size=(24, 2))
        labels = rng.integers(0, 3, 24)
        base = intra_class_distance(pts, labels)
        theta = 0.7
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        moved = pts @ rot + np.array([5.0, -2.0])
        assert intra_class_distance(moved, labels) == pytest.approx(base, abs=1e-9)
        assert intra_class_distance(3.0 * pts, labels) == pytest.approx(3.0 * base, abs=1e-9)


class TestSilhouette:
    def test_antipodal_tight_clusters(self):
        x = np.vstack([np.tile([1.0, 0.0], (10, 1)), np.tile([-1.0, 0.0], (10, 1))])
        labels = np.array([0] * 10 + [1] * 10)
        assert silhouette_cosine(x, labels) == pytest.approx(1.0)

    def test_random_labels_near_zero(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(500, 16))
        labels = rng.integers(0, 5, 500)
        assert abs(silhouette_cosine(x, labels)) < 0.1

    def test_oracle_equality(self):
        rng = np.random.default_rng(8)
        x = random_unit(rng, 25, 10)
        labels = rng.integers(0, 3, 25)
        assert silhouette_cosine(x, labels) == pytest.approx(
            silhouette_oracle(x, labels), abs=1e-12
        )

    def test_singleton_cluster_counts_zero(self):
        x = unit_rows(np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]]))
        labels = np.array([0, 0, 1])
        assert silhouette_cosine(x, labels) == pytest.approx(
            silhouette_oracle(x, labels), abs=1e-12
        )

    def test_range_and_min_classes(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(40, 8))
        labels = rng.integers(0, 4, 40)
        assert -1.0 <= silhouette_cosine(x, labels) <= 1.0
        with pytest.raises(ValidationError):
            silhouette_cosine(x, np.zeros(40, dtype=int))


class TestComputeDiagnostics:
    def test_bundle(self):
        rng = np.random.default_rng(10)
        img = random_unit(rng, 40, 16)
        txt = random_unit(rng, 5, 16)
        labels = rng.integers(0, 5, 40)
        report = compute_diagnostics(
            image_batch(img, labels),
            text_batch(txt),
            ProjectionParams(n_epochs=60),
            provenance={"backbone": "toy"},
        )
        assert -1.0 <= report.alignment <= 1.0
        assert -2.0 <= report.similarity_gap <= 2.0
        assert report.intra_class_distance >= 0.0
        assert -1.0 <= report.silhouette <= 1.0
        assert report.projection.shape == (40, 2)
        assert report.to_json()["provenance"]["backbone"] == "toy"

    def test_without_text(self):
        rng = np.random.default_rng(11)
        img = random_unit(rng, 20, 8)
        labels = rng.integers(0, 3, 20)
        report = compute_diagnostics(image_batch(img, labels), None, ProjectionParams(n_epochs=60))
        assert np.isnan(report.alignment) and np.isnan(report.similarity_gap)
        assert report.intra_class_distance >= 0.0


class TestDensityFigure:
    def test_structure_and_determinism(self, tmp_path):
        rng = np.random.default_rng(12)
        pts = rng.normal(size=(60, 2)) * 4
        labels = rng.integers(0, 5, 60)
        names = [f"class {i}" for i in range(5)]
        p1 = export_density_figure(pts, labels, names, tmp_path / "a.png")
        p2 = export_density_figure(pts, labels, names, tmp_path / "b.png")
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_class_warns_and_renders(self, tmp_path, caplog):
        import logging

        pts = np.array([[0.0, 0.0], [1.0, 1.0], [0.5, 0.2], [0.1, 0.9]])
        labels = np.array([0, 0, 1, 1])
        with caplog.at_level(logging.WARNING):
            export_density_figure(pts, labels, ["a", "b", "ghost"], tmp_path / "c.png")
        assert any("ghost" in rec.message for rec in caplog.records)

    def test_text_overlay(self, tmp_path):
        rng = np.random.default_rng(13)
        pts = rng.normal(size=(30, 2))
        labels = rng.integers(0, 3, 30)
        out = export_density_figure(
            pts, labels, ["a", "b", "c"], tmp_path / "d.png",
            text_points=np.array([[0.0, 0.0], [1.0, 1.0], [-1.0, -1.0]]),
        )
        assert out.exists() and out.stat().st_size > 0
