"""Inverted file and inverted multi-index structures.

Bins partition the database: every image id lands in exactly one bin,
keyed by a coarse quantizer (flat codebook) or by the pair of assignments
of a two-block product quantizer.  Multi-index bins are stored sparsely,
since most of the K^2 cells stay empty at realistic scales.
"""

import heapq
from dataclasses import dataclass

import numpy as np

from .codebooks import (
    Codebook,
    ProductCodebook,
    _as_matrix,
    vq_assign_batch,
)

KIND_IVF = "ivf"
KIND_IMI = "imi"


@dataclass
class InvertedBin:
    bin_id: int
    ids: np.ndarray  # (n,) int64, sorted ascending
    codes: np.ndarray  # (n, M) int32

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.codes = np.asarray(self.codes, dtype=np.int32)
        if self.codes.ndim != 2 or self.codes.shape[0] != self.ids.shape[0]:
            raise ValueError("codes must be (n, M) with one row per id")
        if self.ids.size:
            if np.unique(self.ids).size != self.ids.size:
                raise ValueError("duplicate image ids within a bin")
            if not (np.diff(self.ids) > 0).all():
                raise ValueError("bin entries must be sorted by image id")

    def __len__(self):
        return self.ids.shape[0]


@dataclass
class BinRanking:
    order: np.ndarray  # bin ids, most pertinent first
    pertinence: np.ndarray  # ascending distances or descending scores
    descending: bool = False  # True when pertinence is a score

    def __post_init__(self):
        self.order = np.asarray(self.order, dtype=np.int64)
        self.pertinence = np.asarray(self.pertinence, dtype=np.float64)
        if self.order.shape != self.pertinence.shape:
            raise ValueError("order and pertinence must have equal length")


@dataclass
class InvertedIndex:
    kind: str  # KIND_IVF | KIND_IMI
    bins: dict  # bin id -> InvertedBin; empty IMI bins are absent
    coarse: object  # Codebook (ivf) or ProductCodebook with M == 2 (imi)
    encoder_ref: str = ""
    n_bins: int = 0  # N for ivf, K_imi**2 for imi
    code_width: int = 0

    def __post_init__(self):
        if self.kind not in (KIND_IVF, KIND_IMI):
            raise ValueError(f"unknown index kind {self.kind!r}")

    def bin_size(self, bin_id: int) -> int:
        b = self.bins.get(bin_id)
        return 0 if b is None else len(b)

    def total_entries(self) -> int:
        return sum(len(b) for b in self.bins.values())

    def nonempty_ids(self) -> np.ndarray:
        ids = sorted(k for k, b in self.bins.items() if len(b) > 0)
        return np.asarray(ids, dtype=np.int64)

    def all_image_ids(self) -> np.ndarray:
        if not self.bins:
            return np.zeros(0, dtype=np.int64)
        parts = [b.ids for b in self.bins.values() if len(b)]
        return np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)


def _group_into_bins(keys, X64, encode, n_bins, kind, coarse, encoder_ref,
                     code_width=None, materialize_all=False):
    """Shared assembly: group features by bin key and encode each one.

    Features are visited in id order, so per-bin id lists come out sorted.
    """
    per_bin_ids = {}
    per_bin_codes = {}
    for i, key in enumerate(keys):
        key = int(key)
        code = np.asarray(encode(X64[i], key), dtype=np.int32).reshape(-1)
        if code_width is None:
            code_width = code.shape[0]
        per_bin_ids.setdefault(key, []).append(i)
        per_bin_codes.setdefault(key, []).append(code)
    if code_width is None:
        code_width = 0

    bins = {}
    keys_out = range(n_bins) if materialize_all else sorted(per_bin_ids)
    for key in keys_out:
        ids = per_bin_ids.get(key, [])
        codes = per_bin_codes.get(key, [])
        bins[key] = InvertedBin(
            bin_id=key,
            ids=np.asarray(ids, dtype=np.int64),
            codes=(
                np.asarray(codes, dtype=np.int32)
                if codes
                else np.zeros((0, code_width), dtype=np.int32)
            ),
        )
    return InvertedIndex(
        kind=kind,
        bins=bins,
        coarse=coarse,
        encoder_ref=encoder_ref,
        n_bins=n_bins,
        code_width=code_width,
    )


def ivf_build(features, coarse: Codebook, encode, encoder_ref="",
              code_width=None) -> InvertedIndex:
    """Assign every feature to its nearest coarse codeword and store
    encode(feature, bin) in that bin.  All N bins are materialized."""
    X = _as_matrix(features)
    if X.shape[0] and X.shape[1] != coarse.dim:
        raise ValueError(f"features have dim {X.shape[1]}, codebook dim is {coarse.dim}")
    keys = vq_assign_batch(X, coarse) if X.shape[0] else np.zeros(0, dtype=np.int64)
    return _group_into_bins(
        keys, X, encode, coarse.n_codewords, KIND_IVF, coarse, encoder_ref,
        code_width=code_width, materialize_all=True,
    )


def rank_bins_by_distance(x_query, coarse: Codebook) -> BinRanking:
    """All bins, ascending squared distance to the coarse codeword;
    ties go to the lower bin id."""
    x = np.asarray(x_query, dtype=np.float64)
    if x.shape != (coarse.dim,):
        raise ValueError(f"query has shape {x.shape}, codebook dim is {coarse.dim}")
    d2 = ((coarse.centroids - x) ** 2).sum(axis=1)
    order = np.argsort(d2, kind="stable")
    return BinRanking(order=order, pertinence=d2[order], descending=False)


def rank_bins_by_score(z_prime) -> BinRanking:
    """All bins, descending score; ties go to the lower bin id."""
    z = np.asarray(z_prime, dtype=np.float64)
    order = np.argsort(-z, kind="stable")
    return BinRanking(order=order, pertinence=z[order], descending=True)


def select_shortlist(ranking: BinRanking, index: InvertedIndex, T: int):
    """Walk bins in rank order until the accumulated size reaches T.

    Returns (bin_ids, B, size) where B is the minimal prefix length with
    sum(sizes[:B-1]) <= T <= sum(sizes[:B]).  T == 0 selects nothing; a T
    beyond the database size selects every nonempty ranked bin.
    """
    if T < 0:
        raise ValueError("shortlist target T must be >= 0")
    if T == 0:
        return np.zeros(0, dtype=np.int64), 0, 0
    cum = 0
    for i, bin_id in enumerate(ranking.order):
        cum += index.bin_size(int(bin_id))
        if cum >= T:
            return ranking.order[: i + 1].copy(), i + 1, cum
    # T exceeds the population covered by the ranking
    nonempty = [int(b) for b in ranking.order if index.bin_size(int(b)) > 0]
    return np.asarray(nonempty, dtype=np.int64), len(nonempty), cum


def imi_key(k: int, l: int, K: int) -> int:
    return k * K + l


def imi_assign_batch(X, coarse2: ProductCodebook) -> np.ndarray:
    """Combined bin key k*K + l from the two half-space assignments."""
    if coarse2.M != 2:
        raise ValueError("multi-index coarse quantizer must have exactly 2 blocks")
    X = _as_matrix(X)
    offs = coarse2.offsets
    k = vq_assign_batch(np.ascontiguousarray(X[:, : offs[1]]), coarse2.sub_codebooks[0])
    l = vq_assign_batch(np.ascontiguousarray(X[:, offs[1] :]), coarse2.sub_codebooks[1])
    return k * coarse2.K + l


def imi_build(features, coarse2: ProductCodebook, encode, encoder_ref="",
              code_width=None) -> InvertedIndex:
    """Two-block coarse assignment; only nonempty bins are materialized."""
    if coarse2.M != 2:
        raise ValueError("multi-index coarse quantizer must have exactly 2 blocks")
    X = _as_matrix(features)
    keys = imi_assign_batch(X, coarse2) if X.shape[0] else np.zeros(0, dtype=np.int64)
    return _group_into_bins(
        keys, X, encode, coarse2.K**2, KIND_IMI, coarse2, encoder_ref,
        code_width=code_width, materialize_all=False,
    )


def _pair_traversal(cost0, cost1):
    """Lazily yield (bin_key, total_cost) over the K0 x K1 grid, ascending.

    Classic multi-sequence traversal: both axes are sorted, and a heap
    walks the staircase frontier.  Equal totals resolve to the lower
    combined bin id.
    """
    cost0 = np.asarray(cost0, dtype=np.float64)
    cost1 = np.asarray(cost1, dtype=np.float64)
    K0, K1 = cost0.shape[0], cost1.shape[0]
    ord0 = np.argsort(cost0, kind="stable")
    ord1 = np.argsort(cost1, kind="stable")
    s0 = cost0[ord0]
    s1 = cost1[ord1]

    def key_of(i, j):
        return int(ord0[i]) * K1 + int(ord1[j])

    heap = [(float(s0[0] + s1[0]), key_of(0, 0), 0, 0)]
    seen = {(0, 0)}
    while heap:
        total, key, i, j = heapq.heappop(heap)
        yield key, total
        if i + 1 < K0 and (i + 1, j) not in seen:
            seen.add((i + 1, j))
            heapq.heappush(heap, (float(s0[i + 1] + s1[j]), key_of(i + 1, j), i + 1, j))
        if j + 1 < K1 and (i, j + 1) not in seen:
            seen.add((i, j + 1))
            heapq.heappush(heap, (float(s0[i] + s1[j + 1]), key_of(i, j + 1), i, j + 1))


def _collect_traversal(gen, limit, nonempty, negate):
    order = []
    pert = []
    for key, total in gen:
        if nonempty is not None and key not in nonempty:
            continue
        order.append(key)
        pert.append(-total if negate else total)
        if len(order) >= limit:
            break
    return (
        np.asarray(order, dtype=np.int64),
        np.asarray(pert, dtype=np.float64),
    )


def imi_rank_bins(x_query, coarse2: ProductCodebook, limit: int,
                  nonempty=None) -> BinRanking:
    """First `limit` bins by ascending sum of half-space distances.

    `nonempty`, when given, is the set of occupied bin keys; only those
    count toward the limit.
    """
    if limit < 1:
        raise ValueError("limit must be >= 1")
    if coarse2.M != 2:
        raise ValueError("multi-index coarse quantizer must have exactly 2 blocks")
    x = np.asarray(x_query, dtype=np.float64)
    if x.shape != (coarse2.dim,):
        raise ValueError(f"query has shape {x.shape}, codebook dim is {coarse2.dim}")
    offs = coarse2.offsets
    d1 = ((coarse2.sub_codebooks[0].centroids - x[: offs[1]]) ** 2).sum(axis=1)
    d2 = ((coarse2.sub_codebooks[1].centroids - x[offs[1] :]) ** 2).sum(axis=1)
    order, pert = _collect_traversal(_pair_traversal(d1, d2), limit, nonempty, negate=False)
    return BinRanking(order=order, pertinence=pert, descending=False)


def imi_rank_bins_by_score(z1, z2, limit: int, nonempty=None) -> BinRanking:
    """First `limit` bins by descending z1[k] + z2[l] (learned pertinence)."""
    if limit < 1:
        raise ValueError("limit must be >= 1")
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    order, pert = _collect_traversal(_pair_traversal(-z1, -z2), limit, nonempty, negate=True)
    return BinRanking(order=order, pertinence=pert, descending=True)
