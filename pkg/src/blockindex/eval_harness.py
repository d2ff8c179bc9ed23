"""Retrieval evaluation: average precision, mAP-vs-shortlist curves, and
synthetic dataset generation.

Relevance on synthetic data is same-class membership.  Curve points are
computed per bin budget B: every query scans exactly the top-B ranked
bins, AP is recomputed from scratch at each budget (never interpolated),
and the mean candidate count is reported as the average shortlist size.
"""

from dataclasses import dataclass

import numpy as np

from .features import FeatureSet, read_features, write_features  # noqa: F401
from .search_engine import PipelineConfig, query_top_bins


@dataclass
class CurvePoint:
    B: int
    T_avg: float  # mean shortlist size over queries
    mAP: float

    def __post_init__(self):
        if not 0.0 <= self.mAP <= 1.0:
            raise ValueError(f"mAP {self.mAP} outside [0, 1]")


def average_precision(ranked_ids, relevant) -> float:
    """Mean over all relevant items of the precision at their rank;
    relevant items that were never retrieved contribute zero."""
    rel = np.asarray(sorted(relevant), dtype=np.int64)
    if rel.size == 0:
        raise ValueError("empty relevant set")
    ranked = np.asarray(ranked_ids, dtype=np.int64)
    if ranked.size == 0:
        return 0.0
    hits = np.isin(ranked, rel)
    if not hits.any():
        return 0.0
    ranks = np.flatnonzero(hits) + 1
    precisions = np.arange(1, ranks.size + 1) / ranks
    return float(precisions.sum() / rel.size)


def judgments_from_labels(database: FeatureSet, queries: FeatureSet) -> dict:
    """query row -> array of database ids sharing the query's class."""
    if database.labels is None or queries.labels is None:
        raise ValueError("both sets need labels to derive relevance")
    by_class = {}
    for c in np.unique(database.labels):
        by_class[int(c)] = np.flatnonzero(database.labels == c).astype(np.int64)
    out = {}
    for qid, c in enumerate(queries.labels):
        out[qid] = by_class.get(int(c), np.zeros(0, dtype=np.int64))
    return out


def map_at_T(index, queries: FeatureSet, judgments: dict, cfg: PipelineConfig,
             B_schedule, threads: int = 1) -> list:
    """One CurvePoint per bin budget B.

    threads > 1 fans queries out over a thread pool; results are merged
    in query order, so the output is independent of the thread count.
    """

    def one_query(qid, B):
        rel = judgments[qid]
        if rel.size == 0:
            return None
        res = query_top_bins(queries.vectors[qid], index, cfg, int(B))
        return average_precision(res.ranked_ids, rel), res.candidates

    points = []
    for B in B_schedule:
        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=threads) as pool:
                rows = list(pool.map(lambda q: one_query(q, B), range(queries.count)))
        else:
            rows = [one_query(q, B) for q in range(queries.count)]
        rows = [r for r in rows if r is not None]
        if not rows:
            raise ValueError("no query has a nonempty relevant set")
        aps = [r[0] for r in rows]
        counts = [r[1] for r in rows]
        points.append(CurvePoint(B=int(B), T_avg=float(np.mean(counts)),
                                 mAP=float(np.mean(aps))))
    return points


def curve_to_csv(points) -> str:
    lines = ["B,T_avg,mAP"]
    for p in points:
        lines.append(f"{p.B},{p.T_avg:.6f},{p.mAP:.6f}")
    return "\n".join(lines) + "\n"


def synth_dataset(classes: int, per_class: int, d: int, spread: float,
                  seed: int) -> FeatureSet:
    """Gaussian mixture: class centers uniform in [0, 10]^d, samples
    N(center, spread^2 I), labels attached.  Deterministic in the seed."""
    if min(classes, per_class, d) < 1 or spread < 0:
        raise ValueError("classes, per_class, d must be >= 1 and spread >= 0")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, 10.0, size=(classes, d))
    vectors = np.empty((classes * per_class, d), dtype=np.float32)
    labels = np.empty(classes * per_class, dtype=np.uint32)
    for c in range(classes):
        block = centers[c] + spread * rng.standard_normal((per_class, d))
        vectors[c * per_class : (c + 1) * per_class] = block.astype(np.float32)
        labels[c * per_class : (c + 1) * per_class] = c
    return FeatureSet(vectors=vectors, labels=labels, class_count=classes)


def synth_split(classes: int, per_class_db: int, per_class_queries: int, d: int,
                spread: float, seed: int):
    """Database and query sets drawn from the same class centers."""
    full = synth_dataset(classes, per_class_db + per_class_queries, d, spread, seed)
    per = per_class_db + per_class_queries
    db_rows = []
    q_rows = []
    for c in range(classes):
        start = c * per
        db_rows.extend(range(start, start + per_class_db))
        q_rows.extend(range(start + per_class_db, start + per))
    db = FeatureSet(
        vectors=full.vectors[db_rows],
        labels=full.labels[db_rows],
        class_count=classes,
    )
    queries = FeatureSet(
        vectors=full.vectors[q_rows],
        labels=full.labels[q_rows],
        class_count=classes,
    )
    return db, queries
