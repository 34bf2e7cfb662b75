"""Latent collection, silhouette scoring, PCA embedding, CSV/SVG emission."""

import math

import numpy as np
import pytest
import torch

from heteroseg import (
    EmbedMethod,
    EmbeddingResult,
    LandmarkModelConfig,
    LandmarkNet,
    PixelMode,
    PixelModelConfig,
    UNet,
    cluster_score,
    collect_latents,
    embed_2d,
    rescaled_latents,
    silhouette,
)
from heteroseg.latents import (
    pca_2d,
    read_embedding_csv,
    read_latents_csv,
    scatter_svg,
    write_embedding_csv,
    write_latents_csv,
)
from heteroseg.models import LatentRecord
from heteroseg.synth import default_synthetic_specs, generate_synthetic_centers

SMALL_LANDMARK = LandmarkModelConfig(
    input_size=(32, 32),
    encoder_channels=(4, 8, 8, 8, 8),
    latent_dim=8,
    decoder_channels=(8, 8, 8, 8, 8),
)


@pytest.fixture(scope="module")
def trio():
    return generate_synthetic_centers(default_synthetic_specs(n_samples=6), image_size=32)


def silhouette_oracle(vectors, labels):
    """Definition-literal quadratic silhouette, no vectorization tricks."""
    n = len(labels)
    dist = [
        [math.dist(vectors[i], vectors[j]) for j in range(n)] for i in range(n)
    ]
    scores = []
    for i in range(n):
        own = [j for j in range(n) if labels[j] == labels[i] and j != i]
        a = sum(dist[i][j] for j in own) / len(own)
        b = min(
            sum(dist[i][j] for j in range(n) if labels[j] == u)
            / sum(1 for j in range(n) if labels[j] == u)
            for u in set(labels)
            if u != labels[i]
        )
        denom = max(a, b)
        scores.append(0.0 if denom == 0.0 else (b - a) / denom)
    return sum(scores) / n


class TestSilhouette:
    def test_matches_definition_oracle(self):
        rng = np.random.default_rng(20)
        for trial in range(12):
            n = int(rng.integers(6, 200))
            d = int(rng.integers(2, 6))
            k = int(rng.integers(2, 4))
            labels = [f"c{i % k}" for i in range(n)]
            vectors = rng.normal(size=(n, d))
            got = silhouette(vectors, labels)
            want = silhouette_oracle(vectors, labels)
            assert abs(got - want) < 1e-9

    def test_well_separated_blobs_score_high(self):
        rng = np.random.default_rng(21)
        a = rng.normal(size=(30, 4)) * 0.05
        b = rng.normal(size=(30, 4)) * 0.05 + 10.0
        vectors = np.vstack([a, b])
        labels = ["a"] * 30 + ["b"] * 30
        assert silhouette(vectors, labels) > 0.9

    def test_permuted_labels_score_near_zero(self):
        rng = np.random.default_rng(22)
        a = rng.normal(size=(40, 4)) * 0.05
        b = rng.normal(size=(40, 4)) * 0.05 + 10.0
        vectors = np.vstack([a, b])
        worst = 0.0
        for seed in range(10):
            labels = list("ab" * 40)
            np.random.default_rng(seed).shuffle(labels)
            worst = max(worst, abs(silhouette(vectors, labels)))
        assert worst < 0.1

    def test_rigid_motion_invariance(self):
        rng = np.random.default_rng(23)
        vectors = rng.normal(size=(24, 3))
        labels = ["a", "b", "c"] * 8
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        moved = vectors @ q + np.array([5.0, -3.0, 2.0])
        assert abs(silhouette(vectors, labels) - silhouette(moved, labels)) < 1e-9

    def test_identical_points_in_both_labels_score_zero(self):
        vectors = np.zeros((4, 2))
        assert silhouette(vectors, ["a", "a", "b", "b"]) == 0.0

    def test_range_bounds(self):
        rng = np.random.default_rng(24)
        for _ in range(10):
            vectors = rng.normal(size=(12, 3))
            labels = ["a", "b"] * 6
            value = silhouette(vectors, labels)
            assert -1.0 - 1e-12 <= value <= 1.0 + 1e-12

    def test_single_label_rejected(self):
        with pytest.raises(ValueError):
            silhouette(np.zeros((4, 2)), ["a"] * 4)

    def test_singleton_label_rejected(self):
        with pytest.raises(ValueError):
            silhouette(np.zeros((3, 2)), ["a", "a", "b"])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            silhouette(np.zeros((4, 2)), ["a", "b"])

    def test_cluster_score_on_records_matches_matrix_call(self):
        rng = np.random.default_rng(25)
        vectors = rng.normal(size=(10, 5))
        labels = ["x"] * 5 + ["y"] * 5
        records = [
            LatentRecord(sample_id=f"s{i}", center_id=labels[i], vector=vectors[i])
            for i in range(10)
        ]
        assert cluster_score(records) == cluster_score(vectors, labels)


class TestPca2d:
    def test_reconstruction_error_equals_trailing_eigenvalue_mass(self):
        # the top-2 projection is optimal: squared reconstruction error equals
        # the sum of the trailing eigenvalues of the scatter matrix
        rng = np.random.default_rng(26)
        x = rng.normal(size=(50, 8)) @ np.diag([5, 3, 2, 1, 0.5, 0.3, 0.2, 0.1])
        centered = x - x.mean(axis=0)
        points = pca_2d(x)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        recon = points @ vt[:2]
        err = ((centered - recon) ** 2).sum()
        eigvals = np.sort(np.linalg.eigvalsh(centered.T @ centered))
        assert abs(err - eigvals[:-2].sum()) < 1e-9 * max(1.0, eigvals.sum())

    def test_rank_one_data_second_component_vanishes(self):
        rng = np.random.default_rng(27)
        direction = rng.normal(size=6)
        x = np.outer(rng.normal(size=30), direction)
        points = pca_2d(x)
        assert np.abs(points[:, 1]).max() < 1e-9

    def test_projection_preserves_pairwise_variance_order(self):
        rng = np.random.default_rng(28)
        x = rng.normal(size=(40, 5))
        points = pca_2d(x)
        assert points[:, 0].var() >= points[:, 1].var()

    def test_deterministic_signs(self):
        rng = np.random.default_rng(29)
        x = rng.normal(size=(20, 4))
        np.testing.assert_array_equal(pca_2d(x), pca_2d(x.copy()))

    def test_low_dimension_rejected(self):
        with pytest.raises(ValueError):
            pca_2d(np.zeros((5, 1)))


class TestCollect:
    def test_latents_per_record(self, trio):
        datasets, topology = trio
        torch.manual_seed(0)
        model = LandmarkNet(SMALL_LANDMARK, topology)
        records = collect_latents(model, datasets)
        assert len(records) == 18
        centers = {r.center_id for r in records}
        assert centers == {"SYNTH_A", "SYNTH_B", "SYNTH_C"}
        assert all(r.vector.shape == (8,) for r in records)

    def test_unet_bottleneck_latents(self, trio):
        datasets, _ = trio
        torch.manual_seed(0)
        model = UNet(
            PixelModelConfig(
                input_size=(32, 32), channels=(4, 8, 8, 16),
                mode=PixelMode.MULTICLASS, num_structures=3,
            ),
            model_structures := tuple(datasets[2].availability.present),
        )
        records = collect_latents(model, datasets[:1])
        assert all(r.vector.shape == (16,) for r in records)

    def test_rescaled_latents_change_vectors(self, trio):
        datasets, topology = trio
        torch.manual_seed(0)
        model = LandmarkNet(SMALL_LANDMARK, topology)
        plain = collect_latents(model, datasets[:1])
        rescaled = rescaled_latents(model, datasets[:1], target_area=120.0)
        assert len(plain) == len(rescaled)
        assert any(
            not np.allclose(p.vector, r.vector) for p, r in zip(plain, rescaled)
        )


class TestEmbed:
    def make_records(self, n=12, d=6, k=2, seed=30):
        rng = np.random.default_rng(seed)
        vectors = rng.normal(size=(n, d)) + np.repeat(
            np.arange(k)[:, None] * 8.0, n // k, axis=0
        )
        return [
            LatentRecord(sample_id=f"s{i}", center_id=f"c{i * k // n}", vector=vectors[i])
            for i in range(n)
        ]

    def test_pca_embedding_shapes_and_score(self):
        records = self.make_records()
        result = embed_2d(records)
        assert result.points.shape == (12, 2)
        assert result.method is EmbedMethod.PCA
        assert result.separability > 0.8
        assert result.labels == tuple(r.center_id for r in records)

    def test_too_few_records_rejected(self):
        with pytest.raises(ValueError):
            embed_2d(self.make_records()[:2])

    def test_external_round_trip(self, tmp_path):
        records = self.make_records()
        pca = embed_2d(records)
        path = tmp_path / "embedding.csv"
        write_embedding_csv(records, pca, path)
        external = embed_2d(records, method=EmbedMethod.EXTERNAL, external_path=path)
        np.testing.assert_allclose(external.points, pca.points, atol=1e-12)
        assert external.separability == pca.separability

    def test_external_requires_path(self):
        with pytest.raises(ValueError):
            embed_2d(self.make_records(), method=EmbedMethod.EXTERNAL)

    def test_external_id_mismatch_rejected(self, tmp_path):
        records = self.make_records()
        pca = embed_2d(records)
        path = tmp_path / "embedding.csv"
        write_embedding_csv(records, pca, path)
        with pytest.raises(ValueError):
            read_embedding_csv(path, expected_ids=["nope"] * 12)

    def test_embedding_result_validation(self):
        with pytest.raises(ValueError):
            EmbeddingResult(
                points=np.zeros((3, 2)), labels=("a", "b"),
                method=EmbedMethod.PCA, separability=0.0,
            )
        with pytest.raises(ValueError):
            EmbeddingResult(
                points=np.zeros((2, 2)), labels=("a", "b"),
                method=EmbedMethod.PCA, separability=1.5,
            )


class TestSerialization:
    def test_latents_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(31)
        records = [
            LatentRecord(sample_id=f"s{i}", center_id="c0", vector=rng.normal(size=5))
            for i in range(4)
        ]
        path = tmp_path / "latents.csv"
        write_latents_csv(records, path)
        back = read_latents_csv(path)
        assert [r.sample_id for r in back] == [r.sample_id for r in records]
        for a, b in zip(records, back):
            np.testing.assert_array_equal(a.vector, b.vector)  # repr round trip

    def test_scatter_svg_written(self, tmp_path):
        records = TestEmbed().make_records()
        result = embed_2d(records)
        path = tmp_path / "scatter.svg"
        scatter_svg(result, path)
        text = path.read_text()
        assert text.startswith("<svg")
        # one circle per point plus one legend dot per center
        assert text.count("<circle") == 12 + 2
        assert "c0" in text and "c1" in text  # legend entries
        assert "separability" in text
