import xml.etree.ElementTree as ET

import numpy as np
import pytest

from bsentinel.tsne import (
    ROLE_IMAGE,
    ROLE_TEXT_BACKDOOR,
    ROLE_TEXT_CLEAN,
    ProjectedPoints,
    TsneConfig,
    conditional_affinities,
    export_scatter,
    pairwise_affinities,
    project,
)


def blobs(n_per, dim, centers, noise, seed):
    rng = np.random.default_rng(seed)
    parts = [c + noise * rng.standard_normal((n_per, dim)) for c in centers]
    return np.concatenate(parts)


@pytest.fixture(scope="module")
def small_cloud():
    centers = [np.zeros(8), np.full(8, 4.0), np.concatenate([np.full(4, -4.0), np.zeros(4)])]
    return blobs(20, 8, centers, noise=0.3, seed=0)


class TestAffinities:
    def test_joint_matrix_properties(self, small_cloud):
        p = pairwise_affinities(small_cloud, perplexity=10.0)
        assert p.shape == (60, 60)
        assert np.allclose(p, p.T, atol=1e-12)
        assert np.all(p >= 0)
        assert np.all(np.diag(p) == 0)
        assert abs(p.sum() - 1.0) <= 1e-6

    def test_symmetric_pair_blocks(self):
        # two tight, far-apart pairs: affinity concentrates inside each pair
        x = np.array([[0.0, 0.0], [0.1, 0.0], [50.0, 50.0], [50.1, 50.0]])
        p = pairwise_affinities(x, perplexity=1.5)
        assert p[0, 1] == pytest.approx(p[1, 0], abs=1e-15)
        assert p[2, 3] == pytest.approx(p[3, 2], abs=1e-15)
        assert p[0, 1] > p[0, 2]

    def test_row_perplexity_hits_target(self, small_cloud):
        target = 12.0
        p_cond = conditional_affinities(small_cloud, perplexity=target)
        assert np.allclose(p_cond.sum(axis=1), 1.0, atol=1e-9)
        for row in p_cond:
            nz = row > 0
            entropy = -(row[nz] * np.log2(row[nz])).sum()
            assert abs(2.0**entropy - target) <= 1e-3

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            conditional_affinities(np.zeros((3, 2)), perplexity=1.5)

    def test_infeasible_perplexity(self, small_cloud):
        with pytest.raises(ValueError, match="infeasible"):
            conditional_affinities(small_cloud[:5], perplexity=4.0)


class TestProject:
    def test_deterministic(self, small_cloud):
        cfg = TsneConfig(iterations=120, seed=4, perplexity=10.0)
        a = project(small_cloud, cfg)
        b = project(small_cloud, cfg)
        assert np.array_equal(a.coords, b.coords)
        assert a.kl_checkpoints == b.kl_checkpoints

    def test_kl_nonnegative_and_descending_after_exaggeration(self, small_cloud):
        # learning rate sized down for a 60-point cloud; defaults target larger inputs
        cfg = TsneConfig(iterations=600, seed=0, perplexity=10.0, learning_rate=20.0)
        out = project(small_cloud, cfg)
        assert all(kl >= 0.0 for _, kl in out.kl_checkpoints)
        post = [kl for it, kl in out.kl_checkpoints if it > cfg.exaggeration_iters]
        for earlier, later in zip(post, post[1:]):
            assert later <= earlier + 1e-3
        end_of_exaggeration = [kl for it, kl in out.kl_checkpoints if it == 250][0]
        assert out.final_kl <= end_of_exaggeration

    @pytest.mark.parametrize("seed", range(4))
    def test_square_corners_keep_neighbor_structure(self, seed):
        # nearest map neighbor must be a side-adjacent corner, not the diagonal
        corners = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        diagonal = {0: 2, 1: 3, 2: 0, 3: 1}
        out = project(corners, TsneConfig(perplexity=2.2, iterations=500, seed=seed,
                                          learning_rate=2.0))
        d2 = ((out.coords[:, None, :] - out.coords[None, :, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        for i in range(4):
            assert int(np.argmin(d2[i])) != diagonal[i]

    def test_clusters_separate(self, small_cloud):
        out = project(small_cloud, TsneConfig(iterations=500, seed=0, perplexity=10.0,
                                              learning_rate=20.0))
        groups = [out.coords[i * 20:(i + 1) * 20] for i in range(3)]
        centroids = [g.mean(axis=0) for g in groups]
        for gi, group in enumerate(groups):
            for point in group:
                dists = [np.linalg.norm(point - c) for c in centroids]
                assert int(np.argmin(dists)) == gi

    def test_metadata_validation(self, small_cloud):
        with pytest.raises(ValueError):
            project(small_cloud, TsneConfig(iterations=5), provenance=["clean"])


class TestExport:
    @pytest.fixture()
    def points(self):
        rng = np.random.default_rng(0)
        coords = rng.standard_normal((12, 2))
        provenance = ["clean"] * 5 + ["TrojanWM"] * 5 + ["clean", "TrojanWM"]
        roles = [ROLE_IMAGE] * 10 + [ROLE_TEXT_CLEAN, ROLE_TEXT_BACKDOOR]
        return ProjectedPoints(coords=coords, provenance=provenance, roles=roles,
                               kl_checkpoints=[(50, 0.5)], final_kl=0.5)

    def test_csv_row_count(self, points, tmp_path):
        path = tmp_path / "scatter.csv"
        export_scatter(points, path, format="csv")
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "x,y,role,provenance"
        assert len(lines) == 1 + 12

    def test_svg_well_formed_with_single_text_markers(self, points, tmp_path):
        path = tmp_path / "scatter.svg"
        export_scatter(points, path, format="svg")
        text = path.read_text()
        ET.fromstring(text)  # raises on malformed XML
        assert text.count(">T1<") == 1
        assert text.count(">T2<") == 1

    def test_unknown_format(self, points, tmp_path):
        with pytest.raises(ValueError):
            export_scatter(points, tmp_path / "x.png", format="png")
