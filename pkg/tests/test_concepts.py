import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from endoseg.concepts import (
    ConceptModel,
    apply_labels,
    assign_and_render,
    assign_segments,
    default_labels,
    fit_concepts,
    fit_pca,
    kmeans,
    lloyd_iterations,
    read_concept_model,
    render_mask,
    write_concept_model,
)
from endoseg.data_model import RunConfig
from endoseg.errors import ConfigError, DataError, NumericalError
from endoseg.segments import SegmentRecord
from endoseg.spectral import SegmentMap


def make_records(vectors, image_id="img", fold_id=None):
    records = []
    for s, vec in enumerate(vectors):
        v = np.asarray(vec, dtype=np.float64)
        records.append(SegmentRecord(image_id=image_id, segment_id=s,
                                     bbox=(0, 0, 8, 8), area_cells=1,
                                     vector=v / np.linalg.norm(v),
                                     fold_id=fold_id))
    return records


def planted_vectors(rng, n_per_group, directions, noise=0.02):
    vectors, labels = [], []
    for g, direction in enumerate(directions):
        for _ in range(n_per_group):
            vectors.append(direction + noise * rng.standard_normal(len(direction)))
            labels.append(g)
    return np.asarray(vectors), np.asarray(labels)


class TestFitPca:
    def test_exact_two_dim_subspace(self):
        rng = np.random.default_rng(0)
        coeffs = rng.standard_normal((40, 2))
        axes = np.array([[1.0, 0, 0, 0, 0], [0, 1.0, 0, 0, 0]])
        data = coeffs @ axes + np.array([5.0, -3.0, 2.0, 0.0, 1.0])
        mean, basis = fit_pca(data, 2)
        projected = (data - mean) @ basis
        reconstructed = projected @ basis.T + mean
        assert np.max(np.abs(reconstructed - data)) < 1e-10

    def test_full_dim_preserves_pairwise_distances(self):
        rng = np.random.default_rng(1)
        data = rng.standard_normal((30, 6))
        mean, basis = fit_pca(data, 6)
        projected = (data - mean) @ basis
        for i in range(0, 30, 5):
            for j in range(0, 30, 7):
                d_orig = np.linalg.norm(data[i] - data[j])
                d_proj = np.linalg.norm(projected[i] - projected[j])
                assert abs(d_orig - d_proj) < 1e-10

    def test_explained_variance_matches_covariance_eigensolver(self):
        rng = np.random.default_rng(2)
        data = rng.standard_normal((200, 16)) * np.linspace(3, 0.1, 16)
        mean, basis = fit_pca(data, 4)
        projected = (data - mean) @ basis
        got = projected.var(axis=0, ddof=1)
        # independent oracle: eigenvalues of the sample covariance matrix
        cov = np.cov(data, rowvar=False)
        want = np.sort(np.linalg.eigvalsh(cov))[::-1][:4]
        assert np.max(np.abs(got - want)) < 1e-8

    def test_rank_deficient_error_names_rank(self):
        rng = np.random.default_rng(3)
        coeffs = rng.standard_normal((20, 2))
        data = coeffs @ rng.standard_normal((2, 8))  # rank 2 in dim 8
        with pytest.raises(NumericalError, match="rank 2"):
            fit_pca(data, 5)

    def test_sign_convention(self):
        rng = np.random.default_rng(4)
        data = rng.standard_normal((50, 5))
        _, basis = fit_pca(data, 3)
        for j in range(3):
            col = basis[:, j]
            assert col[np.argmax(np.abs(col))] > 0

    def test_needs_p_plus_one_vectors(self):
        with pytest.raises(ConfigError):
            fit_pca(np.eye(3), 3)

    def test_projection_is_idempotent(self):
        rng = np.random.default_rng(40)
        data = rng.standard_normal((60, 7))
        mean, basis = fit_pca(data, 3)
        once = (data - mean) @ basis
        reconstructed = once @ basis.T + mean
        twice = (reconstructed - mean) @ basis
        assert np.max(np.abs(twice - once)) < 1e-10
        # reconstructing again cannot move points further from the subspace
        again = (twice @ basis.T + mean - mean) @ basis
        assert np.max(np.abs(again - once)) < 1e-10


class TestKmeans:
    def test_k_equals_n_gives_zero_inertia(self):
        rng = np.random.default_rng(5)
        points = rng.standard_normal((7, 3))
        centroids, assignment, inertia = kmeans(points, 7, seed=0)
        assert inertia == 0.0
        assert len(np.unique(assignment)) == 7

    def test_separated_blobs_recovered(self):
        rng = np.random.default_rng(6)
        a = rng.standard_normal((40, 2)) * 0.1 + [10, 0]
        b = rng.standard_normal((40, 2)) * 0.1 + [-10, 0]
        points = np.vstack([a, b])
        truth = np.array([0] * 40 + [1] * 40)
        _, assignment, _ = kmeans(points, 2, seed=0)
        assert adjusted_rand_score(truth, assignment) == 1.0

    def test_inertia_monotone_per_lloyd_iteration(self):
        rng = np.random.default_rng(7)
        points = rng.standard_normal((60, 4))
        init = points[rng.choice(60, size=5, replace=False)]
        _, _, _, history = lloyd_iterations(points, init)
        diffs = np.diff(history)
        assert np.all(diffs <= 1e-9)

    def test_final_assignment_is_fixpoint(self):
        rng = np.random.default_rng(8)
        points = rng.standard_normal((50, 3))
        centroids, assignment, _ = kmeans(points, 4, seed=1)
        d2 = ((points[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        assert np.array_equal(np.argmin(d2, axis=1), assignment)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(9)
        points = rng.standard_normal((80, 5))
        a = kmeans(points, 6, seed=42)
        b = kmeans(points, 6, seed=42)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_duplicate_points_do_not_crash(self):
        points = np.zeros((10, 2))
        points[5:] = 1.0
        centroids, assignment, inertia = kmeans(points, 2, seed=0)
        assert inertia == 0.0

    def test_k_above_n_rejected(self):
        with pytest.raises(ConfigError):
            kmeans(np.zeros((3, 2)), 4, seed=0)


class TestFitConcepts:
    def test_planted_three_groups(self):
        rng = np.random.default_rng(10)
        directions = np.eye(8)[:3] * 4
        vectors, truth = planted_vectors(rng, 10, directions)
        records = make_records(vectors)
        cfg = RunConfig(kmeans_k=3, pca_dim=4)
        model = fit_concepts(records, cfg)
        assignments = assign_segments(model, records)
        got = np.array([a.cluster_id for a in assignments])
        assert adjusted_rand_score(truth, got) == 1.0

    def test_default_k15_with_enough_segments(self):
        rng = np.random.default_rng(11)
        vectors = rng.standard_normal((40, 12))
        model = fit_concepts(make_records(vectors), RunConfig())
        assert model.centroids.shape[0] == 15

    def test_single_record_violates_precondition(self):
        records = make_records(np.array([[1.0, 0.0]]))
        with pytest.raises(ConfigError, match="kmeans_k"):
            fit_concepts(records, RunConfig(kmeans_k=2))


def toy_model(centroids, d=None, labels=None):
    centroids = np.asarray(centroids, dtype=np.float64)
    k, p = centroids.shape
    d = d or p
    basis = np.eye(d)[:, :p]
    return ConceptModel(pca_mean=np.zeros(d), pca_basis=basis,
                        centroids=centroids,
                        labels=labels or default_labels(k), k=k, seed=0)


def checkerboard_map(image_id="img", grid=(2, 2), patch_size=4, n_segments=2):
    assignment = np.zeros(grid, dtype=np.int32)
    assignment[0, 1] = 1
    assignment[1, 0] = 1
    bboxes = tuple((0, 0, grid[1] * patch_size, grid[0] * patch_size)
                   for _ in range(n_segments))
    return SegmentMap(image_id=image_id, assignment=assignment,
                      n_segments=n_segments, bboxes=bboxes,
                      patch_size=patch_size)


class TestAssignAndRender:
    def test_exact_centroid_preimage_distance_zero(self):
        model = toy_model([[1.0, 0.0], [0.0, 1.0]])
        records = make_records([[1.0, 0.0]])
        [a] = assign_segments(model, records)
        assert a.cluster_id == 0 and a.distance < 1e-12

    def test_each_segment_to_nearest_of_two_centroids(self):
        model = toy_model([[5.0, 0.0], [-5.0, 0.0]])
        records = make_records([[1.0, 0.1], [-1.0, 0.1]])
        out = assign_segments(model, records)
        assert [a.cluster_id for a in out] == [0, 1]

    def test_tie_breaks_to_lowest_cluster_id(self):
        model = toy_model([[1.0, 0.0], [-1.0, 0.0]])
        records = make_records([[0.0, 1.0]])  # equidistant
        [a] = assign_segments(model, records)
        assert a.cluster_id == 0

    def test_rendered_pixel_counts_match_segment_areas(self):
        seg_map = checkerboard_map()
        model = toy_model([[1.0, 0.0], [0.0, 1.0]])
        records = make_records([[1.0, 0.0], [0.0, 1.0]])
        _, masks = assign_and_render(model, [seg_map], records)
        mask = masks["img"]
        for seg_id, cluster_id in ((0, 0), (1, 1)):
            area = np.sum(seg_map.assignment == seg_id) * 16
            assert np.sum(mask.labels == cluster_id + 1) == area

    def test_out_of_field_pixels_zeroed(self):
        seg_map = checkerboard_map()
        model = toy_model([[1.0, 0.0], [0.0, 1.0]])
        records = make_records([[1.0, 0.0], [0.0, 1.0]])
        field = np.ones((8, 8), dtype=np.uint8)
        field[:, :4] = 0
        mask = render_mask(model, seg_map,
                           assign_segments(model, records), field)
        assert np.all(mask.labels[:, :4] == 0)
        assert np.all(mask.labels[:, 4:] != 0)

    def test_dimension_mismatch(self):
        model = toy_model([[1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(DataError, match="dim"):
            assign_segments(model, make_records([[1.0, 0.0, 0.0]]))

    def test_train_consistency(self):
        rng = np.random.default_rng(12)
        directions = np.eye(6)[:3] * 3
        vectors, _ = planted_vectors(rng, 12, directions, noise=0.3)
        records = make_records(vectors)
        cfg = RunConfig(kmeans_k=3, pca_dim=4)
        model = fit_concepts(records, cfg)
        projected = model.project(np.stack([r.vector for r in records]))
        _, fit_assignment, _ = kmeans(projected, 3, seed=cfg.seed,
                                      restarts=cfg.kmeans_restarts)
        got = [a.cluster_id for a in assign_segments(model, records)]
        assert got == fit_assignment.tolist()


class TestApplyLabels:
    def test_single_label_merges(self):
        model = toy_model(np.eye(2))
        labeled = apply_labels(model, {0: "lumen"})
        assert labeled.labels[0] == "lumen"
        assert labeled.labels[1] == "cluster-1"

    def test_six_discovered_concepts(self):
        names = ["lumen", "out-of-field", "normal vascular pattern",
                 "textureless", "erythema", "bleeding"]
        model = toy_model(np.arange(30).reshape(15, 2).astype(float))
        labeled = apply_labels(model, dict(enumerate(names)))
        legend = {cid: labeled.labels[cid] for cid in range(6)}
        assert list(legend.values()) == names

    def test_out_of_range_id(self):
        model = toy_model(np.arange(30).reshape(15, 2).astype(float))
        with pytest.raises(ConfigError, match="99"):
            apply_labels(model, {99: "x"})

    def test_labels_never_change_partition(self):
        model = toy_model([[2.0, 0.0], [0.0, 2.0]])
        records = make_records([[1.0, 0.1], [0.1, 1.0]])
        seg_map = checkerboard_map()
        _, masks_before = assign_and_render(model, [seg_map], records)
        relabeled = apply_labels(model, {0: "mucosa", 1: "lumen"})
        _, masks_after = assign_and_render(relabeled, [seg_map], records)
        assert np.array_equal(masks_before["img"].labels,
                              masks_after["img"].labels)
        assert masks_after["img"].legend[1] == "mucosa"


class TestConceptModelIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(13)
        data = rng.standard_normal((50, 10))
        mean, basis = fit_pca(data, 4)
        centroids, _, _ = kmeans((data - mean) @ basis, 5, seed=0)
        model = ConceptModel(pca_mean=mean, pca_basis=basis,
                             centroids=centroids, labels=default_labels(5),
                             k=5, seed=0)
        path = write_concept_model(tmp_path / "m.bin", model)
        back = read_concept_model(path)
        assert back.k == 5 and back.dim == 10 and back.pca_dim == 4
        assert np.max(np.abs(back.centroids - centroids)) < 1e-6
        assert np.max(np.abs(back.pca_basis - basis)) < 1e-5

    def test_truncated_model_rejected(self, tmp_path):
        model = toy_model(np.eye(2))
        path = write_concept_model(tmp_path / "m.bin", model)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(DataError):
            read_concept_model(path)

    def test_labels_sidecar_applied(self, tmp_path):
        model = toy_model(np.eye(2))
        path = write_concept_model(tmp_path / "m.bin", model)
        sidecar = tmp_path / "concepts.json"
        sidecar.write_text('{"1": "bleeding"}')
        back = read_concept_model(path, labels_path=sidecar)
        assert back.labels == {0: "cluster-0", 1: "bleeding"}
