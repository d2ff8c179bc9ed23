"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines as they complete.  Every tolerance and seed is pinned here; the
quantitative retrieval criterion (5) is a seeded regression against a
fixed dataset, network and training schedule.
"""

import math
import time

import numpy as np
import pytest

from blockindex.adc import adc_distance, build_lut
from blockindex.codebooks import (
    KMeansConfig,
    kmeans_train,
    pq_decode,
    pq_encode,
    pq_train,
    vq_assign_batch,
)
from blockindex.eval_harness import (
    average_precision,
    judgments_from_labels,
    map_at_T,
    synth_split,
)
from blockindex.features import FeatureSet
from blockindex.gradcheck import run_gradient_suite
from blockindex.indexing_net import NetworkConfig, TrainConfig, train
from blockindex.ivf_index import BinRanking, imi_rank_bins, select_shortlist
from blockindex.search_engine import (
    PipelineConfig,
    build_index,
    load_index,
    query,
    query_top_bins,
    save_index,
)
from blockindex.subic_encoder import (
    RelaxedBlockCode,
    SubicLossParams,
    batch_entropy_loss,
    entropy_loss,
    subic_loss,
)


def report(num, ok, text):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num}: {text}")
    assert ok, f"criterion {num}: {text}"


def test_criterion_1_adc_exactness():
    """adc_distance equals the decode-then-distance computation to 1e-9
    relative over 10,000 random (residual, code) pairs at d=64, M=8, K=16."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(1001)
    pcb = pq_train(rng.normal(size=(400, 64)), 8, 16, KMeansConfig(n_clusters=16, seed=1))
    worst = 0.0
    for _ in range(10_000):
        r = rng.normal(size=64)
        code = rng.integers(0, 16, size=8)
        got = adc_distance(build_lut(r, pcb), code)
        want = ((r - pq_decode(code, pcb)) ** 2).sum()
        worst = max(worst, abs(got - want) / max(abs(want), 1e-300))
    elapsed = time.perf_counter() - t0
    report(1, worst <= 1e-9 and elapsed < 5.0,
           f"ADC exactness: worst rel err {worst:.2e} over 10000 pairs, {elapsed:.1f}s")


def test_criterion_2_exhaustive_equivalence():
    """IVF-PQ at B=N reproduces a flat exhaustive ADC scan exactly."""
    t0 = time.perf_counter()
    db, queries = synth_split(10, 200, 5, 32, spread=2.0, seed=1002)
    assert db.count == 2000 and queries.count == 50
    X = db.vectors.astype(np.float64)
    coarse = kmeans_train(db, KMeansConfig(n_clusters=16, seed=2))
    assign = vq_assign_batch(X, coarse)
    fine = pq_train(X - coarse.centroids[assign], 8, 16, KMeansConfig(n_clusters=16, seed=3))
    cfg = PipelineConfig(pipeline="ivf_pq", M=8, K=16, n_bins=16, coarse=coarse, fine=fine)
    index = build_index(db, cfg)

    codes = np.vstack([
        pq_encode(X[i] - coarse.centroids[assign[i]], fine).indices for i in range(2000)
    ])
    offs = fine.offsets
    ok = True
    for q in range(50):
        xq = queries.vectors[q].astype(np.float64)
        res = query_top_bins(xq, index, cfg, 16)
        # flat oracle: per-point residual distance to its reconstruction,
        # computed block by block without the index machinery
        dists = np.empty(2000)
        for i in range(2000):
            r = xq - coarse.centroids[assign[i]]
            d = 0.0
            for m in range(8):
                c = fine.sub_codebooks[m].centroids[codes[i, m]]
                d += ((r[offs[m] : offs[m + 1]] - c) ** 2).sum()
            dists[i] = d
        oracle = np.lexsort((np.arange(2000), dists))
        if not np.array_equal(res.ranked_ids, oracle):
            ok = False
            break
    elapsed = time.perf_counter() - t0
    report(2, ok and elapsed < 10.0,
           f"exhaustive equivalence on 2000 points x 50 queries, {elapsed:.1f}s")


def test_criterion_3_gradient_suite():
    """Analytic gradients match central finite differences to 1e-6 relative
    for every objective x residual combination, >= 20 random networks."""
    t0 = time.perf_counter()
    ok, rows = run_gradient_suite(seed=7, nets_per_combo=4, tol=1e-6)
    elapsed = time.perf_counter() - t0
    worst = max(r["max_rel_err"] for r in rows)
    report(3, ok and len(rows) >= 20 and elapsed < 60.0,
           f"gradient suite: {len(rows)} networks, worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_4_entropy_loss_extremes():
    """Entropy-loss extremes and the pinned (mu, gamma) = (0.6, 0.9)
    combination against component recomputation."""
    M, K = 4, 8

    def one_hot(idx):
        blocks = np.zeros((M, K))
        blocks[np.arange(M), idx] = 1.0
        return RelaxedBlockCode(blocks)

    hot_batch = [one_hot([i % K] * M) for i in range(6)]
    le_ok = all(entropy_loss(bt) == 0.0 for bt in hot_batch)

    balanced = [one_hot([(k + m) % K for m in range(M)]) for k in range(K)]
    lb = batch_entropy_loss(balanced)
    lb_ok = abs(lb - (-M * math.log2(K))) <= 1e-12

    rng = np.random.default_rng(1004)
    batch = [RelaxedBlockCode(rng.dirichlet(np.ones(K), size=M)) for _ in range(10)]
    params = SubicLossParams(mu=0.6, gamma=0.9)
    combined = subic_loss(batch, params)
    recomputed = 0.6 / len(batch) * sum(entropy_loss(bt) for bt in batch) \
        + 0.9 * batch_entropy_loss(batch)
    ls_ok = abs(combined - recomputed) <= 1e-12

    report(4, le_ok and lb_ok and ls_ok,
           f"entropy extremes: lE one-hot 0, lB balanced {lb:.12f} "
           f"(target {-M * math.log2(K)}), lS recomputation diff "
           f"{abs(combined - recomputed):.1e}")


def _signal_subspace_split(classes, per_db, per_q, d_signal, d, sig_spread,
                           nuisance_sigma, seed):
    """Class structure confined to the leading d_signal coordinates; the
    remaining dimensions carry high-variance isotropic nuisance.  Rows are
    L2-normalized, as retrieval features typically are.  Euclidean
    geometry is nuisance-dominated, so unsupervised binning splits classes
    while a supervised selector can learn the signal subspace."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, 10.0, size=(classes, d_signal))

    def draw(n_per):
        vec = np.empty((classes * n_per, d), dtype=np.float32)
        lab = np.empty(classes * n_per, dtype=np.uint32)
        for c in range(classes):
            signal = centers[c] + sig_spread * rng.standard_normal((n_per, d_signal))
            noise = nuisance_sigma * rng.standard_normal((n_per, d - d_signal))
            block = np.hstack([signal, noise])
            block /= np.linalg.norm(block, axis=1, keepdims=True)
            vec[c * n_per : (c + 1) * n_per] = block.astype(np.float32)
            lab[c * n_per : (c + 1) * n_per] = c
        return FeatureSet(vec, lab, classes)

    return draw(per_db), draw(per_q)


def test_criterion_5_learned_binning_efficacy():
    """Trained supervised pipeline vs k-means IVF-PQ at equal average
    shortlist size.  Pinned instance: seed 42 everywhere, 5000 batches of
    64; regression floor 1.5x at B=2; both mAP curves non-decreasing."""
    t0 = time.perf_counter()
    SEED = 42
    db, queries = _signal_subspace_split(
        classes=32, per_db=200, per_q=5, d_signal=8, d=64,
        sig_spread=3.0, nuisance_sigma=3.0, seed=SEED)
    judgments = judgments_from_labels(db, queries)
    B_schedule = (1, 2, 4, 8, 16, 32)

    net_cfg = NetworkConfig.for_variant(
        "subic_i", d=64, n_bins=32, M=4, K=16, n_classes=32,
        mu1=0.5, gamma1=1.0, mu2=0.3, gamma2=0.5)
    params = train(db, net_cfg, TrainConfig(
        batch_size=64, num_batches=5000, learning_rate=2.0, seed=SEED))
    subic_cfg = PipelineConfig(pipeline="subic_i", M=4, K=16, n_bins=32,
                               net=params, net_config=net_cfg)
    subic_index = build_index(db, subic_cfg)
    subic_curve = map_at_T(subic_index, queries, judgments, subic_cfg, B_schedule)

    X = db.vectors.astype(np.float64)
    coarse = kmeans_train(db, KMeansConfig(n_clusters=32, seed=SEED))
    fine = pq_train(X - coarse.centroids[vq_assign_batch(X, coarse)], 4, 16,
                    KMeansConfig(n_clusters=16, seed=SEED + 1))
    ivf_cfg = PipelineConfig(pipeline="ivf_pq", M=4, K=16, n_bins=32,
                             coarse=coarse, fine=fine)
    ivf_index_ = build_index(db, ivf_cfg)
    ivf_curve = map_at_T(ivf_index_, queries, judgments, ivf_cfg, B_schedule)

    # the baseline queried at the supervised pipeline's average shortlist size
    T_equal = int(round(subic_curve[1].T_avg))
    aps = [
        average_precision(query(queries.vectors[q], ivf_index_, ivf_cfg, T_equal).ranked_ids,
                          judgments[q])
        for q in range(queries.count)
    ]
    ivf_map_at_equal_T = float(np.mean(aps))

    ratio = subic_curve[1].mAP / max(ivf_map_at_equal_T, 1e-12)
    subic_monotone = all(a.mAP <= b.mAP + 1e-12 for a, b in zip(subic_curve, subic_curve[1:]))
    ivf_monotone = all(a.mAP <= b.mAP + 1e-12 for a, b in zip(ivf_curve, ivf_curve[1:]))
    elapsed = time.perf_counter() - t0

    detail = (f"subic mAP@B=2 {subic_curve[1].mAP:.4f} (T_avg {subic_curve[1].T_avg:.0f}) vs "
              f"ivf-pq mAP@T={T_equal} {ivf_map_at_equal_T:.4f}: {ratio:.2f}x "
              f"(floor 1.5x); curves "
              f"subic {[round(p.mAP, 4) for p in subic_curve]} "
              f"ivf {[round(p.mAP, 4) for p in ivf_curve]}; {elapsed:.0f}s")
    report(5, ratio >= 1.5 and subic_monotone and ivf_monotone and elapsed < 600.0, detail)


def test_criterion_6_shortlist_rule():
    """1000 random (bin sizes, T) instances satisfy the prefix double
    inequality sum(<B) <= T <= sum(<=B) exactly."""

    class Sized:
        def __init__(self, sizes):
            self.sizes = sizes

        def bin_size(self, b):
            return int(self.sizes[b])

    rng = np.random.default_rng(1006)
    checked = 0
    ok = True
    while checked < 1000:
        n = int(rng.integers(1, 40))
        sizes = rng.integers(0, 25, size=n)
        total = int(sizes.sum())
        if total == 0:
            continue
        T = int(rng.integers(1, total + 1))
        ranking = BinRanking(order=np.arange(n), pertinence=np.arange(n, dtype=float))
        _, B, size = select_shortlist(ranking, Sized(sizes), T)
        prefix = np.concatenate([[0], np.cumsum(sizes)])
        if not (prefix[B - 1] <= T <= prefix[B] and size == prefix[B]):
            ok = False
            break
        checked += 1
    report(6, ok, f"shortlist double inequality exact on {checked} random instances")


def test_criterion_7_imi_prefix_correctness():
    """Multi-sequence traversal prefixes match the full K^2-way sort for
    every prefix length, over 100 random queries, K_imi in (4, 8, 16)."""
    rng = np.random.default_rng(1007)
    ok = True
    for K_imi in (4, 8, 16):
        train_data = rng.normal(size=(30 * K_imi, 8))
        pcb = pq_train(train_data, 2, K_imi, KMeansConfig(n_clusters=K_imi, seed=int(K_imi)))
        for _ in range(100):
            x = rng.normal(size=8)
            ranking = imi_rank_bins(x, pcb, limit=K_imi**2)
            d1 = ((pcb.sub_codebooks[0].centroids - x[:4]) ** 2).sum(axis=1)
            d2 = ((pcb.sub_codebooks[1].centroids - x[4:]) ** 2).sum(axis=1)
            full = (d1[:, None] + d2[None, :]).reshape(-1)
            oracle = np.lexsort((np.arange(K_imi**2), full))
            # whole-order equality covers every prefix length L
            if not np.array_equal(ranking.order, oracle):
                ok = False
                break
        if not ok:
            break
    report(7, ok, "IMI traversal prefix equals full sort for K_imi in (4, 8, 16), 100 queries each")


def _run_full_pipeline(tmp_path, tag):
    """synth -> train -> build -> save -> load -> eval, returning every
    artifact needed for bit-comparison."""
    db, queries = synth_split(6, 50, 3, 16, spread=1.5, seed=1008)
    net_cfg = NetworkConfig.for_variant(
        "subic_i", d=16, n_bins=6, M=2, K=4, n_classes=6,
        mu1=0.3, gamma1=0.6, mu2=0.2, gamma2=0.4)
    params = train(db, net_cfg, TrainConfig(batch_size=16, num_batches=400,
                                            learning_rate=0.02, seed=1008))
    cfg = PipelineConfig(pipeline="subic_i", M=2, K=4, n_bins=6,
                         net=params, net_config=net_cfg)
    index = build_index(db, cfg)
    path = tmp_path / f"{tag}.bidx"
    save_index(path, index, cfg)
    index2, cfg2 = load_index(path)
    judgments = judgments_from_labels(db, queries)
    curve = map_at_T(index2, queries, judgments, cfg2, [1, 2, 4, 6])
    results = [query(queries.vectors[q], index2, cfg2, 40) for q in range(queries.count)]
    pre_save = [query(queries.vectors[q], index, cfg, 40) for q in range(queries.count)]
    return path.read_bytes(), curve, results, pre_save


def test_criterion_8_determinism_and_persistence(tmp_path):
    """The full pipeline is bit-reproducible under a fixed seed, and
    load(save(.)) yields bit-identical query results."""
    t0 = time.perf_counter()
    bytes_a, curve_a, results_a, pre_a = _run_full_pipeline(tmp_path, "a")
    bytes_b, curve_b, results_b, _ = _run_full_pipeline(tmp_path, "b")

    bytes_ok = bytes_a == bytes_b
    curve_ok = [(p.B, p.T_avg, p.mAP) for p in curve_a] == \
        [(p.B, p.T_avg, p.mAP) for p in curve_b]
    results_ok = all(
        np.array_equal(ra.ranked_ids, rb.ranked_ids) and np.array_equal(ra.scores, rb.scores)
        for ra, rb in zip(results_a, results_b)
    )
    roundtrip_ok = all(
        np.array_equal(ra.ranked_ids, rp.ranked_ids) and np.array_equal(ra.scores, rp.scores)
        for ra, rp in zip(results_a, pre_a)
    )
    elapsed = time.perf_counter() - t0
    report(8, bytes_ok and curve_ok and results_ok and roundtrip_ok,
           f"bit-reproducible pipeline (container bytes, curves, query results) "
           f"and exact save/load round trip, {elapsed:.0f}s")


def test_criterion_9_kmeans_objective_monotone():
    """Lloyd objective non-increasing on every iteration, 100 seeded runs."""
    ok = True
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(60, 200))
        d = int(rng.integers(2, 12))
        k = int(rng.integers(2, 12))
        X = rng.normal(size=(n, d)) * rng.uniform(0.5, 3.0)
        cb = kmeans_train(X, KMeansConfig(n_clusters=k, max_iters=30, tol=0.0, seed=seed))
        hist = cb.objective_history
        if not all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(hist, hist[1:])):
            ok = False
            break
    report(9, ok, "k-means objective non-increasing across 100 seeded runs")
