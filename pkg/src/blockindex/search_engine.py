"""End-to-end build and query pipelines, plus index persistence.

Six pipelines share one inverted-file skeleton and differ in how bins
are chosen and how shortlisted candidates are scored:

  ivf_pq     k-means bins, residual product codes, ADC distances (asc)
  imi_pq     two-block coarse quantizer, residual codes, ADC (asc)
  subic_i/j/r  learned bins via argmax of the selector activations,
             one-hot encoder codes scored by the query's encoder
             activations (descending inner product)
  subic_imi  learned two-block bin selector, same encoder scoring

All pipelines rank bins, cut a shortlist with the same accumulation rule
on the target size T, then score only candidates inside the selected
bins.
"""

import logging
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from . import container as cont
from .adc import adc_scan, build_lut
from .codebooks import (
    Codebook,
    ProductCodebook,
    pq_encode,
)
from .features import FeatureSet
from .indexing_net import NetworkConfig, NetworkParams, MATRIX_NAMES, forward_batch
from .ivf_index import (
    InvertedBin,
    InvertedIndex,
    KIND_IMI,
    KIND_IVF,
    _group_into_bins,
    _pair_traversal,
    imi_assign_batch,
    ivf_build,
    rank_bins_by_distance,
    rank_bins_by_score,
    select_shortlist,
)

log = logging.getLogger(__name__)

PIPELINES = ("ivf_pq", "imi_pq", "subic_i", "subic_j", "subic_r", "subic_imi")
LEARNED = ("subic_i", "subic_j", "subic_r", "subic_imi")


@dataclass
class PipelineConfig:
    pipeline: str
    M: int  # fine-code blocks
    K: int  # fine-code block size
    n_bins: int | None = None  # N, flat pipelines
    k_imi: int | None = None  # per-axis bin count, multi-index pipelines
    T_schedule: tuple = ()
    # trained models; may be attached after construction but must be
    # present before build_index / query
    coarse: Codebook | None = None  # ivf_pq
    coarse2: ProductCodebook | None = None  # imi_pq
    fine: ProductCodebook | None = None  # ivf_pq / imi_pq
    net: NetworkParams | None = None  # learned pipelines
    net_config: NetworkConfig | None = None

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValueError(f"unknown pipeline {self.pipeline!r}")
        self.T_schedule = tuple(int(t) for t in self.T_schedule)
        if any(lo > hi for lo, hi in zip(self.T_schedule, self.T_schedule[1:])):
            raise ValueError("T_schedule must be ascending")
        if self.is_imi:
            if self.k_imi is None:
                raise ValueError(f"{self.pipeline} needs k_imi")
        elif self.n_bins is None:
            raise ValueError(f"{self.pipeline} needs n_bins")

    @property
    def is_learned(self):
        return self.pipeline in LEARNED

    @property
    def is_imi(self):
        return self.pipeline in ("imi_pq", "subic_imi")

    @property
    def total_bins(self):
        return self.k_imi**2 if self.is_imi else self.n_bins

    def _require(self, *names):
        for name in names:
            if getattr(self, name) is None:
                raise ValueError(f"pipeline {self.pipeline} needs {name!r} attached")

    def validate_models(self):
        if self.pipeline == "ivf_pq":
            self._require("coarse", "fine")
            if self.coarse.n_codewords != self.n_bins:
                raise ValueError("coarse codebook size disagrees with n_bins")
        elif self.pipeline == "imi_pq":
            self._require("coarse2", "fine")
            if self.coarse2.M != 2 or self.coarse2.K != self.k_imi:
                raise ValueError("coarse2 must be a 2-block codebook of size k_imi")
        else:
            self._require("net", "net_config")
            nc = self.net_config
            if nc.M != self.M or nc.K != self.K:
                raise ValueError("network encoder shape disagrees with pipeline M, K")
            want_blocks = 2 if self.pipeline == "subic_imi" else 1
            if nc.bin_blocks != want_blocks:
                raise ValueError(f"{self.pipeline} needs bin_blocks == {want_blocks}")
            want_bins = self.k_imi if self.pipeline == "subic_imi" else self.n_bins
            if nc.n_bins != want_bins:
                raise ValueError("network bin count disagrees with pipeline config")


@dataclass
class QueryResult:
    ranked_ids: np.ndarray  # int64
    scores: np.ndarray  # ascending distances or descending scores
    bins_scanned: int  # B
    candidates: int  # shortlist size reached

    def __post_init__(self):
        self.ranked_ids = np.asarray(self.ranked_ids, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)


def _empty_result():
    return QueryResult(
        ranked_ids=np.zeros(0, dtype=np.int64),
        scores=np.zeros(0, dtype=np.float64),
        bins_scanned=0,
        candidates=0,
    )


def _stitched_coarse(coarse2: ProductCodebook, key: int) -> np.ndarray:
    k, l = divmod(int(key), coarse2.K)
    return np.concatenate(
        [coarse2.sub_codebooks[0].centroids[k], coarse2.sub_codebooks[1].centroids[l]]
    )


def _learned_keys_and_codes(X, cfg: PipelineConfig):
    """Bin keys and one-hot code indices for a feature matrix."""
    nc = cfg.net_config
    b = forward_batch(np.asarray(X, dtype=np.float64), cfg.net, nc, train=False)
    zp = b.Zp.reshape(-1, nc.bin_blocks, nc.n_bins)
    block_arg = zp.argmax(axis=2)
    if nc.bin_blocks == 1:
        keys = block_arg[:, 0]
    else:
        keys = block_arg[:, 0] * nc.n_bins + block_arg[:, 1]
    codes = b.Z.reshape(-1, nc.M, nc.K).argmax(axis=2).astype(np.int32)
    return keys.astype(np.int64), codes, b


def build_index(features: FeatureSet, cfg: PipelineConfig) -> InvertedIndex:
    cfg.validate_models()
    X = np.asarray(features.vectors, dtype=np.float64)

    if cfg.pipeline == "ivf_pq":
        fine = cfg.fine

        def encode(x, bin_id):
            return pq_encode(x - cfg.coarse.centroids[bin_id], fine).indices

        return ivf_build(
            features, cfg.coarse, encode,
            encoder_ref=f"residual_pq(M={cfg.M},K={cfg.K})", code_width=cfg.M,
        )

    if cfg.pipeline == "imi_pq":
        keys = (
            imi_assign_batch(X, cfg.coarse2)
            if X.shape[0]
            else np.zeros(0, dtype=np.int64)
        )

        def encode(x, key):
            return pq_encode(x - _stitched_coarse(cfg.coarse2, key), cfg.fine).indices

        return _group_into_bins(
            keys, X, encode, cfg.coarse2.K**2, KIND_IMI, cfg.coarse2,
            encoder_ref=f"residual_pq(M={cfg.M},K={cfg.K})", code_width=cfg.M,
        )

    # learned pipelines
    nc = cfg.net_config
    if X.shape[0]:
        keys, codes, _ = _learned_keys_and_codes(X, cfg)
    else:
        keys = np.zeros(0, dtype=np.int64)
        codes = np.zeros((0, cfg.M), dtype=np.int32)

    # codes were computed in one batched pass; hand them out in id order
    per_feature = iter(codes)

    def encode(x, key):
        return next(per_feature)

    kind = KIND_IMI if cfg.pipeline == "subic_imi" else KIND_IVF
    return _group_into_bins(
        keys, X, encode, nc.total_bins, kind, None,
        encoder_ref=f"one_hot(M={cfg.M},K={cfg.K})", code_width=cfg.M,
        materialize_all=(kind == KIND_IVF),
    )


def _rank_ascending(ids, scores):
    order = np.lexsort((ids, scores))
    return ids[order], scores[order]


def _rank_descending(ids, scores):
    order = np.lexsort((ids, -scores))
    return ids[order], scores[order]


def _scan_adc_bins(x, index: InvertedIndex, cfg: PipelineConfig, bin_ids):
    """ADC distances over the entries of the given bins (any order)."""
    all_ids = []
    all_d = []
    for key in bin_ids:
        b = index.bins.get(int(key))
        if b is None or len(b) == 0:
            continue
        if cfg.pipeline == "ivf_pq":
            r = x - cfg.coarse.centroids[int(key)]
        else:
            r = x - _stitched_coarse(cfg.coarse2, int(key))
        lut = build_lut(r, cfg.fine, bin_id=int(key))
        all_ids.append(b.ids)
        all_d.append(adc_scan(lut, b.codes))
    if not all_ids:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64)
    return _rank_ascending(np.concatenate(all_ids), np.concatenate(all_d))


def _scan_learned_bins(z, index: InvertedIndex, cfg: PipelineConfig, bin_ids):
    """Inner-product scores z^T b over the entries of the given bins."""
    z2d = z.reshape(cfg.M, cfg.K)
    cols = np.arange(cfg.M)[None, :]
    all_ids = []
    all_s = []
    for key in bin_ids:
        b = index.bins.get(int(key))
        if b is None or len(b) == 0:
            continue
        all_ids.append(b.ids)
        all_s.append(z2d[cols, b.codes].sum(axis=1))
    if not all_ids:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64)
    return _rank_descending(np.concatenate(all_ids), np.concatenate(all_s))


def _imi_bin_stream(x_or_blocks, index: InvertedIndex, cfg: PipelineConfig):
    """Nonempty bins best-first for a multi-index pipeline."""
    if cfg.pipeline == "imi_pq":
        offs = cfg.coarse2.offsets
        x = x_or_blocks
        c0 = ((cfg.coarse2.sub_codebooks[0].centroids - x[: offs[1]]) ** 2).sum(axis=1)
        c1 = ((cfg.coarse2.sub_codebooks[1].centroids - x[offs[1] :]) ** 2).sum(axis=1)
    else:
        z1, z2 = x_or_blocks
        c0, c1 = -z1, -z2
    for key, _ in _pair_traversal(c0, c1):
        if index.bin_size(key) > 0:
            yield key


def _take_bins(stream, index: InvertedIndex, T=None, B=None):
    """Consume nonempty bins until the shortlist reaches T items (or B bins)."""
    taken = []
    cum = 0
    for key in stream:
        taken.append(key)
        cum += index.bin_size(key)
        if T is not None and cum >= T:
            break
        if B is not None and len(taken) >= B:
            break
    return np.asarray(taken, dtype=np.int64), len(taken), cum


def _query_vector(x, cfg: PipelineConfig):
    x = np.asarray(x, dtype=np.float64)
    if cfg.pipeline == "ivf_pq" and x.shape != (cfg.coarse.dim,):
        raise ValueError(f"query has shape {x.shape}, index dim is {cfg.coarse.dim}")
    if cfg.pipeline == "imi_pq" and x.shape != (cfg.coarse2.dim,):
        raise ValueError(f"query has shape {x.shape}, index dim is {cfg.coarse2.dim}")
    if cfg.is_learned and x.shape != (cfg.net_config.d,):
        raise ValueError(f"query has shape {x.shape}, network input dim is {cfg.net_config.d}")
    return x


def query(x_query, index: InvertedIndex, cfg: PipelineConfig, T: int) -> QueryResult:
    """Rank bins, cut the shortlist at target size T, score candidates."""
    if T < 0:
        raise ValueError("shortlist target T must be >= 0")
    cfg.validate_models()
    x = _query_vector(x_query, cfg)
    if T == 0:
        return _empty_result()

    if cfg.pipeline == "ivf_pq":
        ranking = rank_bins_by_distance(x, cfg.coarse)
        bin_ids, B, size = select_shortlist(ranking, index, T)
        ids, scores = _scan_adc_bins(x, index, cfg, bin_ids)
    elif cfg.pipeline == "imi_pq":
        bin_ids, B, size = _take_bins(_imi_bin_stream(x, index, cfg), index, T=T)
        ids, scores = _scan_adc_bins(x, index, cfg, bin_ids)
    else:
        nc = cfg.net_config
        b = forward_batch(x[None, :], cfg.net, nc, train=False)
        zp = b.Zp[0]
        z = b.Z[0]
        if cfg.pipeline == "subic_imi":
            blocks = zp.reshape(2, nc.n_bins)
            stream = _imi_bin_stream((blocks[0], blocks[1]), index, cfg)
            bin_ids, B, size = _take_bins(stream, index, T=T)
        else:
            ranking = rank_bins_by_score(zp)
            bin_ids, B, size = select_shortlist(ranking, index, T)
        ids, scores = _scan_learned_bins(z, index, cfg, bin_ids)

    return QueryResult(ranked_ids=ids, scores=scores, bins_scanned=B, candidates=size)


def query_top_bins(x_query, index: InvertedIndex, cfg: PipelineConfig, B: int) -> QueryResult:
    """Score every candidate in the first B ranked bins (nonempty bins for
    multi-index pipelines); used for shortlist-size sweeps."""
    if B < 0:
        raise ValueError("B must be >= 0")
    cfg.validate_models()
    x = _query_vector(x_query, cfg)
    if B == 0:
        return _empty_result()

    if cfg.pipeline == "ivf_pq":
        ranking = rank_bins_by_distance(x, cfg.coarse)
        bin_ids = ranking.order[:B]
        ids, scores = _scan_adc_bins(x, index, cfg, bin_ids)
    elif cfg.pipeline == "imi_pq":
        bin_ids, _, _ = _take_bins(_imi_bin_stream(x, index, cfg), index, B=B)
        ids, scores = _scan_adc_bins(x, index, cfg, bin_ids)
    else:
        nc = cfg.net_config
        fb = forward_batch(x[None, :], cfg.net, nc, train=False)
        zp, z = fb.Zp[0], fb.Z[0]
        if cfg.pipeline == "subic_imi":
            blocks = zp.reshape(2, nc.n_bins)
            bin_ids, _, _ = _take_bins(
                _imi_bin_stream((blocks[0], blocks[1]), index, cfg), index, B=B
            )
        else:
            bin_ids = rank_bins_by_score(zp).order[:B]
        ids, scores = _scan_learned_bins(z, index, cfg, bin_ids)

    return QueryResult(
        ranked_ids=ids, scores=scores, bins_scanned=int(len(bin_ids)),
        candidates=int(ids.shape[0]),
    )


# --- persistence ----------------------------------------------------------

_NETCFG_FIELDS = [f.name for f in dc_fields(NetworkConfig)]


def _codebook_sections(prefix, cb: Codebook):
    return [(f"{prefix}/centroids", cont.array_to_bytes(cb.centroids))]


def _codebook_from(sections, prefix):
    return Codebook(centroids=cont.array_from_bytes(sections[f"{prefix}/centroids"]))


def _pcb_sections(prefix, pcb: ProductCodebook):
    out = [(
        f"{prefix}/meta",
        cont.text_to_bytes({
            "M": pcb.M,
            "K": pcb.K,
            "sub_dims": ",".join(str(s) for s in pcb.sub_dims),
        }),
    )]
    for m, sub in enumerate(pcb.sub_codebooks):
        out.append((f"{prefix}/sub{m}", cont.array_to_bytes(sub.centroids)))
    return out


def _pcb_from(sections, prefix):
    meta = cont.text_from_bytes(sections[f"{prefix}/meta"])
    M = int(meta["M"])
    return ProductCodebook(
        M=M,
        K=int(meta["K"]),
        sub_dims=tuple(int(s) for s in meta["sub_dims"].split(",")),
        sub_codebooks=[
            Codebook(centroids=cont.array_from_bytes(sections[f"{prefix}/sub{m}"]))
            for m in range(M)
        ],
    )


def _net_sections(params: NetworkParams, nc: NetworkConfig):
    cfg_pairs = {name: repr(getattr(nc, name)) for name in _NETCFG_FIELDS}
    out = [
        ("net/config", cont.text_to_bytes(cfg_pairs)),
        ("net/frozen", ",".join(sorted(params.frozen)).encode("utf-8")),
    ]
    for name, mat in params.matrices().items():
        out.append((f"net/{name}", cont.array_to_bytes(mat)))
    return out


def _parse_scalar(text):
    if text in ("True", "False"):
        return text == "True"
    if text == "None":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text.strip("'\"")


def _net_from(sections):
    pairs = cont.text_from_bytes(sections["net/config"])
    nc = NetworkConfig(**{k: _parse_scalar(v) for k, v in pairs.items()})
    frozen_raw = sections["net/frozen"].decode("utf-8")
    mats = {}
    for name in MATRIX_NAMES:
        key = f"net/{name}"
        mats[name] = cont.array_from_bytes(sections[key]) if key in sections else None
    params = NetworkParams(
        **mats,
        frozen=frozenset(frozen_raw.split(",")) if frozen_raw else frozenset(),
    )
    return params, nc


def _index_sections(index: InvertedIndex):
    keys = np.asarray(sorted(index.bins), dtype=np.int64)
    sizes = [len(index.bins[int(k)]) for k in keys]
    offsets = np.zeros(len(keys) + 1, dtype=np.int64)
    np.cumsum(sizes, out=offsets[1:])
    if len(keys):
        ids = np.concatenate([index.bins[int(k)].ids for k in keys])
        codes = np.concatenate(
            [index.bins[int(k)].codes.reshape(-1, index.code_width) for k in keys]
        )
    else:
        ids = np.zeros(0, dtype=np.int64)
        codes = np.zeros((0, index.code_width), dtype=np.int32)
    return [
        ("index/meta", cont.text_to_bytes({
            "kind": index.kind,
            "encoder_ref": index.encoder_ref,
            "n_bins": index.n_bins,
            "code_width": index.code_width,
        })),
        ("index/keys", cont.array_to_bytes(keys)),
        ("index/offsets", cont.array_to_bytes(offsets)),
        ("index/ids", cont.array_to_bytes(ids)),
        ("index/codes", cont.array_to_bytes(codes)),
    ]


def _index_from(sections, coarse):
    meta = cont.text_from_bytes(sections["index/meta"])
    keys = cont.array_from_bytes(sections["index/keys"])
    offsets = cont.array_from_bytes(sections["index/offsets"])
    ids = cont.array_from_bytes(sections["index/ids"])
    codes = cont.array_from_bytes(sections["index/codes"])
    bins = {}
    for i, key in enumerate(keys):
        lo, hi = int(offsets[i]), int(offsets[i + 1])
        bins[int(key)] = InvertedBin(
            bin_id=int(key), ids=ids[lo:hi], codes=codes[lo:hi]
        )
    return InvertedIndex(
        kind=meta["kind"],
        bins=bins,
        coarse=coarse,
        encoder_ref=meta["encoder_ref"],
        n_bins=int(meta["n_bins"]),
        code_width=int(meta["code_width"]),
    )


def _model_sections(cfg: PipelineConfig):
    out = []
    if cfg.coarse is not None:
        out += _codebook_sections("coarse", cfg.coarse)
    if cfg.coarse2 is not None:
        out += _pcb_sections("coarse2", cfg.coarse2)
    if cfg.fine is not None:
        out += _pcb_sections("fine", cfg.fine)
    if cfg.net is not None:
        out += _net_sections(cfg.net, cfg.net_config)
    return out


def _pipeline_section(cfg: PipelineConfig):
    pairs = {
        "pipeline": cfg.pipeline,
        "M": cfg.M,
        "K": cfg.K,
        "n_bins": "" if cfg.n_bins is None else cfg.n_bins,
        "k_imi": "" if cfg.k_imi is None else cfg.k_imi,
        "T_schedule": ",".join(str(t) for t in cfg.T_schedule),
    }
    return ("pipeline/config", cont.text_to_bytes(pairs))


def _pipeline_from(sections):
    pairs = cont.text_from_bytes(sections["pipeline/config"])
    cfg = PipelineConfig(
        pipeline=pairs["pipeline"],
        M=int(pairs["M"]),
        K=int(pairs["K"]),
        n_bins=int(pairs["n_bins"]) if pairs.get("n_bins") else None,
        k_imi=int(pairs["k_imi"]) if pairs.get("k_imi") else None,
        T_schedule=tuple(
            int(t) for t in pairs.get("T_schedule", "").split(",") if t
        ),
    )
    if "coarse/centroids" in sections:
        cfg.coarse = _codebook_from(sections, "coarse")
    if "coarse2/meta" in sections:
        cfg.coarse2 = _pcb_from(sections, "coarse2")
    if "fine/meta" in sections:
        cfg.fine = _pcb_from(sections, "fine")
    if "net/config" in sections:
        cfg.net, cfg.net_config = _net_from(sections)
    return cfg


def save_index(path, index: InvertedIndex, cfg: PipelineConfig):
    """One container holding the bins, every model matrix, and the config."""
    sections = [_pipeline_section(cfg)]
    sections += _model_sections(cfg)
    sections += _index_sections(index)
    cont.write_container(path, sections)


def load_index(path):
    """Inverse of save_index; returns (index, config-with-models)."""
    sections = cont.read_container(path)
    cfg = _pipeline_from(sections)
    coarse = cfg.coarse if cfg.pipeline == "ivf_pq" else cfg.coarse2
    index = _index_from(sections, coarse)
    return index, cfg


def save_models(path, cfg: PipelineConfig):
    """Checkpoint container: models and pipeline config, no bins."""
    sections = [_pipeline_section(cfg)]
    sections += _model_sections(cfg)
    cont.write_container(path, sections)


def load_models(path) -> PipelineConfig:
    return _pipeline_from(cont.read_container(path))
