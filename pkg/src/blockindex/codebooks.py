"""Codebook learning and vector / product quantization.

Lloyd's k-means is implemented directly (rather than delegated to a
library) because the trainer must expose a per-iteration objective
history, guarantee a non-increasing objective, and apply a fixed
empty-cluster repair rule; those behaviours are part of this module's
contract and are exercised by the tests.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .features import FeatureSet

log = logging.getLogger(__name__)


@dataclass
class KMeansConfig:
    n_clusters: int
    max_iters: int = 50
    tol: float = 1e-4  # relative objective change that counts as converged
    seed: int = 0
    init: str = "kmeans++"  # "kmeans++" | "random-points"

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")
        if self.init not in ("kmeans++", "random-points"):
            raise ValueError(f"unknown init scheme {self.init!r}")


@dataclass
class Codebook:
    """A set of centroids; rows are codewords."""

    centroids: np.ndarray  # (N, d) float64
    objective: float | None = None  # final sum of squared quantization errors
    objective_history: list[float] | None = field(default=None, repr=False)

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError(f"centroids must be a nonempty 2-D array, got {c.shape}")
        if not np.isfinite(c).all():
            raise ValueError("centroids contain non-finite entries")
        self.centroids = c

    @property
    def n_codewords(self):
        return self.centroids.shape[0]

    @property
    def dim(self):
        return self.centroids.shape[1]


@dataclass
class ProductCodebook:
    """M independent codebooks over disjoint contiguous coordinate ranges."""

    M: int
    K: int
    sub_dims: tuple
    sub_codebooks: list  # M Codebooks, sub_codebooks[m] is (K, sub_dims[m])

    def __post_init__(self):
        if self.M < 1 or self.K < 2:
            raise ValueError("need M >= 1 and K >= 2")
        self.sub_dims = tuple(int(s) for s in self.sub_dims)
        if len(self.sub_dims) != self.M or len(self.sub_codebooks) != self.M:
            raise ValueError("sub_dims and sub_codebooks must both have length M")
        for m, cb in enumerate(self.sub_codebooks):
            if cb.centroids.shape != (self.K, self.sub_dims[m]):
                raise ValueError(
                    f"sub-codebook {m} has shape {cb.centroids.shape}, "
                    f"expected {(self.K, self.sub_dims[m])}"
                )

    @property
    def dim(self):
        return sum(self.sub_dims)

    @property
    def offsets(self):
        """Start offset of each coordinate block, plus the total dim."""
        out = [0]
        for s in self.sub_dims:
            out.append(out[-1] + s)
        return out


@dataclass
class PQCode:
    indices: np.ndarray  # (M,) ints, each in [0, K)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)


def _as_matrix(data):
    if isinstance(data, FeatureSet):
        return np.asarray(data.vectors, dtype=np.float64)
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected (n, d) data, got shape {x.shape}")
    return x


def _sqdist_to_centroids(X, centroids, chunk_rows=None):
    """Squared distances (n, N), computed by direct differencing in chunks.

    Direct (x - c)^2 sums keep bit-for-bit agreement with the
    single-vector assignment path, including on exact ties.
    """
    n, d = X.shape
    N = centroids.shape[0]
    if chunk_rows is None:
        chunk_rows = max(1, (1 << 22) // max(1, N * d))
    out = np.empty((n, N), dtype=np.float64)
    for start in range(0, n, chunk_rows):
        stop = min(n, start + chunk_rows)
        diff = X[start:stop, None, :] - centroids[None, :, :]
        out[start:stop] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _init_centroids(X, n_clusters, rng, scheme):
    n = X.shape[0]
    if scheme == "random-points":
        idx = rng.choice(n, size=n_clusters, replace=False)
        return X[idx].copy()
    # kmeans++: first centre uniform, then proportional to squared distance
    # to the nearest centre already chosen.
    centroids = np.empty((n_clusters, X.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = X[first]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, n_clusters):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with chosen centres
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = X[idx]
        d2 = np.minimum(d2, ((X - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeans_train(data, cfg: KMeansConfig) -> Codebook:
    """Lloyd's algorithm.

    Iterates until the relative objective change drops below cfg.tol or
    cfg.max_iters is reached.  The objective (sum over points of the
    squared distance to the nearest centroid) is checked to be
    non-increasing on every iteration.  A cluster that loses all members
    is re-seeded to the point with the largest current quantization
    error.
    """
    X = _as_matrix(data)
    n = X.shape[0]
    if not np.isfinite(X).all():
        raise ValueError("training data contains non-finite entries")
    if n < cfg.n_clusters:
        raise ValueError(f"need at least {cfg.n_clusters} points, got {n}")

    rng = np.random.default_rng(cfg.seed)
    centroids = _init_centroids(X, cfg.n_clusters, rng, cfg.init)
    history = []
    prev_obj = None

    for it in range(cfg.max_iters):
        d2 = _sqdist_to_centroids(X, centroids)
        assign = np.argmin(d2, axis=1)
        obj = float(d2[np.arange(n), assign].sum())
        if prev_obj is not None and obj > prev_obj * (1 + 1e-12) + 1e-12:
            raise RuntimeError(
                f"k-means objective increased at iteration {it}: "
                f"{prev_obj} -> {obj}"
            )
        history.append(obj)
        if prev_obj is not None and (prev_obj - obj) <= cfg.tol * max(prev_obj, 1e-300):
            break
        prev_obj = obj

        counts = np.bincount(assign, minlength=cfg.n_clusters).astype(np.float64)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, X)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]

        if not nonempty.all():
            errs = d2[np.arange(n), assign].copy()
            for k in np.flatnonzero(~nonempty):
                worst = int(np.argmax(errs))
                centroids[k] = X[worst]
                errs[worst] = -np.inf  # don't hand the same point to two clusters

    log.debug("k-means finished after %d iterations, objective %.6g", len(history), history[-1])
    return Codebook(centroids=centroids, objective=history[-1], objective_history=history)


def vq_assign(x, cb: Codebook) -> int:
    """Index of the nearest codeword (squared L2); ties go to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (cb.dim,):
        raise ValueError(f"feature has shape {x.shape}, codebook dim is {cb.dim}")
    d2 = ((cb.centroids - x) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def vq_assign_batch(X, cb: Codebook) -> np.ndarray:
    """Vectorized vq_assign over the rows of X; bit-identical to the scalar path."""
    X = _as_matrix(X)
    if X.shape[1] != cb.dim:
        raise ValueError(f"features have dim {X.shape[1]}, codebook dim is {cb.dim}")
    d2 = _sqdist_to_centroids(X, cb.centroids)
    return np.argmin(d2, axis=1)


def residual(x, cb: Codebook, n: int) -> np.ndarray:
    """x minus its coarse reconstruction, x - d_n."""
    if not 0 <= n < cb.n_codewords:
        raise IndexError(f"codeword index {n} out of range [0, {cb.n_codewords})")
    x = np.asarray(x, dtype=np.float64)
    return x - cb.centroids[n]


def split_dims(d: int, M: int) -> tuple:
    """Contiguous equal split of d coordinates into M blocks; any remainder
    goes to the leading blocks."""
    if M < 1 or d < M:
        raise ValueError(f"cannot split {d} dims into {M} blocks")
    base, extra = divmod(d, M)
    return tuple(base + (1 if m < extra else 0) for m in range(M))


def pq_train(residuals, M: int, K: int, cfg: KMeansConfig) -> ProductCodebook:
    """Train M independent sub-codebooks of size K on contiguous coordinate
    blocks.  Each block gets its own seeded k-means run."""
    X = _as_matrix(residuals)
    n, d = X.shape
    if n < K:
        raise ValueError(f"need at least {K} residuals to train K={K} codebooks, got {n}")
    dims = split_dims(d, M)
    subs = []
    offset = 0
    for m in range(M):
        block = np.ascontiguousarray(X[:, offset : offset + dims[m]])
        sub_cfg = replace(cfg, n_clusters=K, seed=cfg.seed + m)
        subs.append(kmeans_train(block, sub_cfg))
        offset += dims[m]
    return ProductCodebook(M=M, K=K, sub_dims=dims, sub_codebooks=subs)


def pq_encode(r, pcb: ProductCodebook) -> PQCode:
    """Per-block nearest sub-codeword indices."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (pcb.dim,):
        raise ValueError(f"residual has shape {r.shape}, codebook dim is {pcb.dim}")
    offs = pcb.offsets
    idx = np.empty(pcb.M, dtype=np.int64)
    for m in range(pcb.M):
        idx[m] = vq_assign(r[offs[m] : offs[m + 1]], pcb.sub_codebooks[m])
    return PQCode(indices=idx)


def pq_encode_batch(R, pcb: ProductCodebook) -> np.ndarray:
    """Encode rows of R; returns (n, M) int32 codes."""
    X = _as_matrix(R)
    if X.shape[1] != pcb.dim:
        raise ValueError(f"residuals have dim {X.shape[1]}, codebook dim is {pcb.dim}")
    offs = pcb.offsets
    out = np.empty((X.shape[0], pcb.M), dtype=np.int32)
    for m in range(pcb.M):
        block = np.ascontiguousarray(X[:, offs[m] : offs[m + 1]])
        out[:, m] = vq_assign_batch(block, pcb.sub_codebooks[m]).astype(np.int32)
    return out


def pq_decode(code, pcb: ProductCodebook) -> np.ndarray:
    """Stitch the selected sub-codewords back into a full vector."""
    idx = code.indices if isinstance(code, PQCode) else np.asarray(code, dtype=np.int64)
    if idx.shape != (pcb.M,):
        raise ValueError(f"code has {idx.shape} indices, expected ({pcb.M},)")
    parts = []
    for m in range(pcb.M):
        k = int(idx[m])
        if not 0 <= k < pcb.K:
            raise IndexError(f"block {m}: index {k} out of range [0, {pcb.K})")
        parts.append(pcb.sub_codebooks[m].centroids[k])
    return np.concatenate(parts)
