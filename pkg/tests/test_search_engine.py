import numpy as np
import pytest

import blockindex.container as cont
from blockindex.codebooks import (
    KMeansConfig,
    kmeans_train,
    pq_decode,
    pq_encode,
    pq_train,
    vq_assign,
    vq_assign_batch,
)
from blockindex.eval_harness import synth_split
from blockindex.features import FeatureSet
from blockindex.indexing_net import NetworkConfig, TrainConfig, init_params, train
from blockindex.search_engine import (
    PipelineConfig,
    build_index,
    load_index,
    load_models,
    query,
    query_top_bins,
    save_index,
    save_models,
)


@pytest.fixture(scope="module")
def small_data():
    return synth_split(6, 40, 2, 12, spread=1.2, seed=100)


@pytest.fixture(scope="module")
def ivf_setup(small_data):
    db, queries = small_data
    X = db.vectors.astype(np.float64)
    coarse = kmeans_train(db, KMeansConfig(n_clusters=6, seed=0))
    residuals = X - coarse.centroids[vq_assign_batch(X, coarse)]
    fine = pq_train(residuals, 3, 4, KMeansConfig(n_clusters=4, seed=1))
    cfg = PipelineConfig(pipeline="ivf_pq", M=3, K=4, n_bins=6,
                         T_schedule=(10, 50, 100), coarse=coarse, fine=fine)
    return db, queries, cfg, build_index(db, cfg)


@pytest.fixture(scope="module")
def subic_setup(small_data):
    db, queries = small_data
    ncfg = NetworkConfig.for_variant(
        "subic_i", d=12, n_bins=6, M=3, K=4, n_classes=6,
        mu1=0.3, gamma1=0.6, mu2=0.2, gamma2=0.4)
    params = train(db, ncfg, TrainConfig(batch_size=16, num_batches=800,
                                         learning_rate=0.02, seed=7))
    cfg = PipelineConfig(pipeline="subic_i", M=3, K=4, n_bins=6,
                         net=params, net_config=ncfg)
    return db, queries, cfg, build_index(db, cfg)


class TestBuildIndex:
    def test_single_point(self, ivf_setup):
        db, _, cfg, _ = ivf_setup
        one = FeatureSet(db.vectors[:1])
        index = build_index(one, cfg)
        assert index.total_entries() == 1
        assert len(index.nonempty_ids()) == 1

    def test_zero_weight_net_puts_everything_in_bin_zero(self, small_data):
        db, _ = small_data
        ncfg = NetworkConfig.for_variant("subic_i", d=12, n_bins=6, M=3, K=4, n_classes=6)
        params = init_params(ncfg, np.random.default_rng(0))
        for _, m in params.matrices().items():
            m[:] = 0.0
        cfg = PipelineConfig(pipeline="subic_i", M=3, K=4, n_bins=6,
                             net=params, net_config=ncfg)
        index = build_index(db, cfg)
        assert index.bins[0].ids.size == db.count
        assert index.total_entries() == db.count

    def test_entries_reverify_against_encoder(self, ivf_setup):
        db, _, cfg, index = ivf_setup
        X = db.vectors.astype(np.float64)
        assert index.total_entries() == db.count
        seen = set()
        for bin_id, b in index.bins.items():
            for row, i in enumerate(b.ids):
                seen.add(int(i))
                assert vq_assign(X[i], cfg.coarse) == bin_id
                want = pq_encode(X[i] - cfg.coarse.centroids[bin_id], cfg.fine).indices
                np.testing.assert_array_equal(b.codes[row], want)
        assert seen == set(range(db.count))

    def test_missing_models_rejected(self):
        cfg = PipelineConfig(pipeline="ivf_pq", M=2, K=4, n_bins=4)
        with pytest.raises(ValueError, match="needs"):
            build_index(FeatureSet(np.zeros((1, 4), dtype=np.float32)), cfg)


class TestQuery:
    def test_indexed_point_ranks_first(self, ivf_setup):
        db, _, cfg, index = ivf_setup
        X = db.vectors.astype(np.float64)
        for i in (0, 17, 101):
            x = X[i]
            bin_id = vq_assign(x, cfg.coarse)
            T = index.bins[bin_id].ids.size
            res = query(x, index, cfg, T)
            # oracle: the decode-distance of the point's own code
            r = x - cfg.coarse.centroids[bin_id]
            code = pq_encode(r, cfg.fine)
            own = ((r - pq_decode(code, cfg.fine)) ** 2).sum()
            assert res.scores[0] <= own + 1e-12
            assert i in res.ranked_ids[: max(1, int((res.scores <= own + 1e-12).sum()))]

    def test_t_zero_gives_empty_result(self, ivf_setup):
        _, queries, cfg, index = ivf_setup
        res = query(queries.vectors[0], index, cfg, 0)
        assert res.bins_scanned == 0 and res.candidates == 0 and res.ranked_ids.size == 0

    def test_full_scan_equals_exhaustive_adc(self, ivf_setup):
        db, queries, cfg, index = ivf_setup
        X = db.vectors.astype(np.float64)
        assign = vq_assign_batch(X, cfg.coarse)
        codes = np.vstack([
            pq_encode(X[i] - cfg.coarse.centroids[assign[i]], cfg.fine).indices
            for i in range(db.count)
        ])
        for q in range(5):
            xq = queries.vectors[q].astype(np.float64)
            res = query(xq, index, cfg, db.count)
            # flat oracle: per-point residual LUT distances over all bins
            dists = np.empty(db.count)
            for i in range(db.count):
                r = xq - cfg.coarse.centroids[assign[i]]
                d = 0.0
                offs = cfg.fine.offsets
                for m in range(cfg.fine.M):
                    c = cfg.fine.sub_codebooks[m].centroids[codes[i, m]]
                    d += ((r[offs[m]:offs[m + 1]] - c) ** 2).sum()
                dists[i] = d
            oracle = np.lexsort((np.arange(db.count), dists))
            np.testing.assert_array_equal(res.ranked_ids, oracle)
            assert res.candidates == db.count

    def test_candidate_sets_grow_with_t(self, ivf_setup):
        _, queries, cfg, index = ivf_setup
        xq = queries.vectors[1]
        prev = set()
        for T in (1, 20, 60, 150, 400):
            res = query(xq, index, cfg, T)
            ids = set(res.ranked_ids.tolist())
            assert prev <= ids
            prev = ids

    def test_no_ids_outside_scanned_bins(self, ivf_setup):
        db, queries, cfg, index = ivf_setup
        from blockindex.ivf_index import rank_bins_by_distance, select_shortlist

        xq = queries.vectors[2].astype(np.float64)
        res = query(xq, index, cfg, 30)
        ranking = rank_bins_by_distance(xq, cfg.coarse)
        bin_ids, B, _ = select_shortlist(ranking, index, 30)
        allowed = set()
        for b in bin_ids:
            allowed.update(index.bins[int(b)].ids.tolist())
        assert set(res.ranked_ids.tolist()) <= allowed
        assert res.bins_scanned == B

    def test_negative_t_rejected(self, ivf_setup):
        _, queries, cfg, index = ivf_setup
        with pytest.raises(ValueError):
            query(queries.vectors[0], index, cfg, -1)

    def test_learned_scores_descend(self, subic_setup):
        _, queries, cfg, index = subic_setup
        res = query(queries.vectors[0], index, cfg, 50)
        assert (np.diff(res.scores) <= 1e-15).all()

    def test_learned_self_retrieval(self, subic_setup):
        # querying with an indexed feature: its own code picks the
        # per-block argmax of its own activations, so no candidate can
        # outscore it; rank 1 is the feature itself up to exact code ties,
        # which resolve to the lower image id
        db, _, cfg, index = subic_setup
        X = db.vectors.astype(np.float64)
        for i in range(0, db.count, 40):
            res = query(X[i], index, cfg, 40)
            ranked = res.ranked_ids.tolist()
            assert i in ranked
            mine = res.scores[ranked.index(i)]
            assert mine == res.scores[0]
            tied_top = [ranked[k] for k in range(len(ranked)) if res.scores[k] == mine]
            assert ranked[0] == min(tied_top)

    def test_learned_full_scan_covers_database(self, subic_setup):
        db, queries, cfg, index = subic_setup
        res = query(queries.vectors[0], index, cfg, db.count)
        assert res.candidates == db.count
        assert np.unique(res.ranked_ids).size == db.count


class TestQueryTopBins:
    def test_b_covers_everything_at_n(self, ivf_setup):
        db, queries, cfg, index = ivf_setup
        res = query_top_bins(queries.vectors[0], index, cfg, cfg.n_bins)
        assert res.candidates == db.count

    def test_matches_query_shortlist(self, ivf_setup):
        db, queries, cfg, index = ivf_setup
        xq = queries.vectors[3]
        via_t = query(xq, index, cfg, 25)
        via_b = query_top_bins(xq, index, cfg, via_t.bins_scanned)
        np.testing.assert_array_equal(via_t.ranked_ids, via_b.ranked_ids)
        np.testing.assert_array_equal(via_t.scores, via_b.scores)


class TestPersistence:
    def test_roundtrip_bit_exact_queries(self, ivf_setup, tmp_path):
        db, queries, cfg, index = ivf_setup
        path = tmp_path / "index.bidx"
        save_index(path, index, cfg)
        index2, cfg2 = load_index(path)
        for q in range(4):
            a = query(queries.vectors[q], index, cfg, 50)
            b = query(queries.vectors[q], index2, cfg2, 50)
            np.testing.assert_array_equal(a.ranked_ids, b.ranked_ids)
            np.testing.assert_array_equal(a.scores, b.scores)
            assert a.bins_scanned == b.bins_scanned and a.candidates == b.candidates

    def test_learned_roundtrip(self, subic_setup, tmp_path):
        db, queries, cfg, index = subic_setup
        path = tmp_path / "subic.bidx"
        save_index(path, index, cfg)
        index2, cfg2 = load_index(path)
        for name, m in cfg.net.matrices().items():
            np.testing.assert_array_equal(m, getattr(cfg2.net, name))
        a = query(queries.vectors[1], index, cfg, 80)
        b = query(queries.vectors[1], index2, cfg2, 80)
        np.testing.assert_array_equal(a.ranked_ids, b.ranked_ids)
        np.testing.assert_array_equal(a.scores, b.scores)

    def test_save_is_deterministic(self, ivf_setup, tmp_path):
        _, _, cfg, index = ivf_setup
        p1, p2 = tmp_path / "a.bidx", tmp_path / "b.bidx"
        save_index(p1, index, cfg)
        save_index(p2, index, cfg)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_file_rejected(self, ivf_setup, tmp_path):
        _, _, cfg, index = ivf_setup
        path = tmp_path / "t.bidx"
        save_index(path, index, cfg)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(ValueError, match="truncated"):
            load_index(path)

    def test_wrong_magic_rejected_first(self, tmp_path):
        path = tmp_path / "junk.bidx"
        path.write_bytes(b"JUNKJUNKJUNK" + b"\x00" * 100)
        with pytest.raises(ValueError, match="magic"):
            load_index(path)

    def test_checksum_mismatch_rejected(self, ivf_setup, tmp_path):
        _, _, cfg, index = ivf_setup
        path = tmp_path / "c.bidx"
        save_index(path, index, cfg)
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0xFF  # corrupt the last payload byte
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="checksum"):
            load_index(path)

    def test_model_checkpoint_roundtrip(self, subic_setup, tmp_path):
        _, _, cfg, _ = subic_setup
        path = tmp_path / "ckpt.bidx"
        save_models(path, cfg)
        back = load_models(path)
        assert back.pipeline == "subic_i"
        for name, m in cfg.net.matrices().items():
            np.testing.assert_array_equal(m, getattr(back.net, name))
        assert back.net_config == cfg.net_config


class TestContainer:
    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "x.bidx"
        cont.write_container(path, [("a", b"hello")])
        path.write_bytes(path.read_bytes() + b"extra")
        with pytest.raises(ValueError, match="trailing"):
            cont.read_container(path)

    def test_sections_keep_order_and_content(self, tmp_path):
        path = tmp_path / "y.bidx"
        cont.write_container(path, [("one", b"1"), ("two", b"22")])
        back = cont.read_container(path)
        assert list(back) == ["one", "two"]
        assert back["two"] == b"22"

    def test_array_roundtrip(self):
        a = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
        b = cont.array_from_bytes(cont.array_to_bytes(a))
        np.testing.assert_array_equal(a, b)
        assert a.dtype == b.dtype
