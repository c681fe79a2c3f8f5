import numpy as np
import pytest

from margreid.evaluation import (
    CmcCurve,
    ProtocolError,
    ScoreMatrix,
    cmc,
    euclidean_baseline,
    fuse_scores,
    match_ranks,
    read_scores_csv,
    single_shot_split,
    write_cmc_csv,
    write_scores_csv,
)


def brute_force_ranks(scores, probe_ids, gallery_ids):
    """Exhaustive oracle: sort each row by (score, gallery index)."""
    ranks = []
    for i, pid in enumerate(probe_ids):
        order = sorted(range(len(gallery_ids)), key=lambda j: (scores[i, j], j))
        true_j = gallery_ids.index(pid)
        ranks.append(order.index(true_j) + 1)
    return np.array(ranks)


def curve_from_ranks(ranks, n_gallery):
    return np.array([(ranks <= r).mean() for r in range(1, n_gallery + 1)])


class TestCmc:
    def test_three_probe_example(self):
        # true-match ranks (1, 2, 1) -> rates start [2/3, 1, 1]
        ids = ["p", "q", "r"]
        scores = np.array([
            [0.0, 5.0, 9.0],   # p: own match best -> rank 1
            [0.1, 0.5, 9.0],   # q: own match second -> rank 2
            [5.0, 9.0, 0.0],   # r: own match best -> rank 1
        ])
        curve = cmc(ScoreMatrix(scores=scores, probe_ids=ids, gallery_ids=ids))
        np.testing.assert_allclose(curve.rates, [2 / 3, 1.0, 1.0])

    def test_all_tied_scores_resolved_by_index(self):
        ids = ["a", "b", "c"]
        s = ScoreMatrix(scores=np.zeros((3, 3)), probe_ids=ids, gallery_ids=ids)
        np.testing.assert_array_equal(match_ranks(s), [1, 2, 3])
        c1 = cmc(s)
        c2 = cmc(ScoreMatrix(scores=np.zeros((3, 3)), probe_ids=ids, gallery_ids=ids))
        np.testing.assert_array_equal(c1.rates, c2.rates)

    def test_matches_brute_force_on_random_matrices(self):
        rng = np.random.default_rng(0)
        ids = [f"id{i}" for i in range(10)]
        for trial in range(30):
            scores = rng.random((10, 10))
            if trial % 3 == 0:  # quantize to force ties
                scores = np.round(scores * 4) / 4
            s = ScoreMatrix(scores=scores, probe_ids=ids, gallery_ids=ids)
            expected = curve_from_ranks(brute_force_ranks(scores, ids, ids), 10)
            np.testing.assert_array_equal(cmc(s).rates, expected)

    def test_probe_identity_missing_from_gallery(self):
        s = ScoreMatrix(scores=np.zeros((1, 2)), probe_ids=["x"], gallery_ids=["a", "b"])
        with pytest.raises(ProtocolError):
            cmc(s)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        ids = [f"i{k}" for k in range(8)]
        scores = rng.random((8, 8))
        base = cmc(ScoreMatrix(scores=scores, probe_ids=ids, gallery_ids=ids))
        warped = cmc(ScoreMatrix(scores=np.exp(3 * scores), probe_ids=ids, gallery_ids=ids))
        np.testing.assert_array_equal(base.rates, warped.rates)

    def test_curve_invariants(self):
        rng = np.random.default_rng(2)
        ids = [f"i{k}" for k in range(12)]
        curve = cmc(ScoreMatrix(scores=rng.random((12, 12)), probe_ids=ids, gallery_ids=ids))
        assert np.all(np.diff(curve.rates) >= 0)
        assert curve.rates[-1] == 1.0

    def test_duplicate_gallery_identity_rejected(self):
        with pytest.raises(ProtocolError):
            ScoreMatrix(scores=np.zeros((1, 2)), probe_ids=["a"], gallery_ids=["a", "a"])


class TestFusion:
    def test_single_method_is_rescaled_matrix(self):
        ids = ["a", "b"]
        s = ScoreMatrix(scores=np.array([[2.0, 4.0], [1.0, 1.0]]), probe_ids=ids, gallery_ids=ids)
        fused = fuse_scores([s])
        np.testing.assert_array_equal(fused.scores, [[0.0, 1.0], [0.0, 0.0]])

    def test_two_identical_methods_preserve_argmin(self):
        rng = np.random.default_rng(3)
        ids = [f"g{k}" for k in range(6)]
        s = ScoreMatrix(scores=rng.random((4, 6)), probe_ids=[f"g{k}" for k in range(4)], gallery_ids=ids)
        fused = fuse_scores([s, s])
        np.testing.assert_array_equal(np.argmin(fused.scores, axis=1), np.argmin(s.scores, axis=1))

    def test_hand_scripted_two_matrix_case(self):
        ids_p, ids_g = ["p0", "p1"], ["p0", "p1", "x"]
        a = ScoreMatrix(scores=np.array([[0.0, 1.0, 2.0], [3.0, 3.0, 3.0]]), probe_ids=ids_p, gallery_ids=ids_g)
        b = ScoreMatrix(scores=np.array([[4.0, 0.0, 2.0], [1.0, 0.0, 3.0]]), probe_ids=ids_p, gallery_ids=ids_g)
        fused = fuse_scores([a, b])
        expected = np.array([[0.0 + 1.0, 0.5 + 0.0, 1.0 + 0.5], [0.0 + 1 / 3, 0.0 + 0.0, 0.0 + 1.0]])
        np.testing.assert_allclose(fused.scores, expected)

    def test_layout_mismatch_rejected(self):
        a = ScoreMatrix(scores=np.zeros((1, 2)), probe_ids=["a"], gallery_ids=["a", "b"])
        b = ScoreMatrix(scores=np.zeros((1, 2)), probe_ids=["a"], gallery_ids=["b", "a"])
        with pytest.raises(ValueError):
            fuse_scores([a, b])


class TestEuclideanBaseline:
    def test_identical_features_zero(self):
        x = np.array([[1.0, 2.0]])
        s = euclidean_baseline(x, x, ["a"], ["a"])
        assert s.scores[0, 0] == 0.0

    def test_orthonormal_vectors_sqrt2(self):
        e = np.eye(3)
        s = euclidean_baseline(e, e, ["a", "b", "c"], ["a", "b", "c"])
        off = s.scores[~np.eye(3, dtype=bool)]
        np.testing.assert_allclose(off, np.sqrt(2.0), atol=1e-12)

    def test_random_matches_norm_oracle(self):
        rng = np.random.default_rng(4)
        p = rng.normal(size=(4, 5))
        g = rng.normal(size=(4, 5))
        ids = list("abcd")
        s = euclidean_baseline(p, g, ids, ids)
        for i in range(4):
            for j in range(4):
                assert abs(s.scores[i, j] - np.linalg.norm(p[i] - g[j])) <= 1e-10


class TestSingleShotSplit:
    def test_two_view_single_image_dataset(self):
        from margreid.data import synth_generate, SynthConfig

        ds = synth_generate(SynthConfig(n_identities=5, latent_dim=4, noise_scale=0.0, seed=1))
        probes, gallery = single_shot_split(ds, seed=0)
        assert [r.identity for r in probes] == [r.identity for r in gallery] == ds.identities()
        assert all(r.view == "a" for r in probes)
        assert all(r.view == "b" for r in gallery)

    def test_subsampling_deterministic(self):
        from margreid.data import Dataset, DatasetRecord
        import numpy as np

        stripes = np.full((6, 430), 1.0 / 430)
        records = []
        for idx in range(3):  # multiple images per view for one identity
            records.append(DatasetRecord(identity="a", view="a", stripes=stripes, image_id=f"a_{idx}"))
            records.append(DatasetRecord(identity="a", view="b", stripes=stripes, image_id=f"a_{idx + 10}"))
        ds = Dataset(records=records)
        p1, g1 = single_shot_split(ds, seed=9)
        p2, g2 = single_shot_split(ds, seed=9)
        assert [r.image_id for r in p1] == [r.image_id for r in p2]
        assert [r.image_id for r in g1] == [r.image_id for r in g2]

    def test_identity_missing_view_excluded_with_warning(self, caplog):
        from margreid.data import Dataset, DatasetRecord

        stripes = np.full((6, 430), 1.0 / 430)
        ds = Dataset(records=[
            DatasetRecord(identity="both", view="a", stripes=stripes),
            DatasetRecord(identity="both", view="b", stripes=stripes),
            DatasetRecord(identity="only_a", view="a", stripes=stripes),
        ])
        with caplog.at_level("WARNING"):
            probes, gallery = single_shot_split(ds)
        assert [r.identity for r in probes] == ["both"]
        assert "only_a" in caplog.text


class TestCsvIo:
    def test_scores_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        s = ScoreMatrix(scores=rng.random((3, 4)), probe_ids=["p1", "p2", "p3"], gallery_ids=["g1", "g2", "g3", "g4"])
        path = tmp_path / "scores.csv"
        write_scores_csv(path, s)
        back = read_scores_csv(path)
        np.testing.assert_array_equal(back.scores, s.scores)
        assert back.probe_ids == s.probe_ids
        assert back.gallery_ids == s.gallery_ids

    def test_cmc_csv_format(self, tmp_path):
        curve = CmcCurve(rates=np.array([0.5, 0.75, 1.0]))
        path = tmp_path / "cmc.csv"
        write_cmc_csv(path, curve)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "rank,rate"
        assert lines[1].startswith("1,0.5")
        assert len(lines) == 4
