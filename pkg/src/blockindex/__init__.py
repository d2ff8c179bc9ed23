"""Inverted-file vector indexing with product-quantized and learned
block-structured codes: codebook training, index construction, querying,
and mAP-vs-shortlist evaluation."""

from .codebooks import (
    Codebook,
    KMeansConfig,
    PQCode,
    ProductCodebook,
    kmeans_train,
    pq_decode,
    pq_encode,
    pq_train,
    residual,
    vq_assign,
)
from .features import FeatureSet, read_features, write_features
from .indexing_net import NetworkConfig, NetworkParams, TrainConfig, forward, train
from .ivf_index import BinRanking, InvertedBin, InvertedIndex
from .search_engine import (
    PipelineConfig,
    QueryResult,
    build_index,
    load_index,
    query,
    save_index,
)
from .subic_encoder import (
    BlockCode,
    RelaxedBlockCode,
    SubicLossParams,
    batch_entropy_loss,
    block_one_hot,
    block_softmax,
    entropy_loss,
    subic_loss,
)

__version__ = "0.1.0"

__all__ = [
    "BinRanking",
    "BlockCode",
    "Codebook",
    "FeatureSet",
    "InvertedBin",
    "InvertedIndex",
    "KMeansConfig",
    "NetworkConfig",
    "NetworkParams",
    "PipelineConfig",
    "PQCode",
    "ProductCodebook",
    "QueryResult",
    "RelaxedBlockCode",
    "SubicLossParams",
    "TrainConfig",
    "batch_entropy_loss",
    "block_one_hot",
    "block_softmax",
    "build_index",
    "entropy_loss",
    "forward",
    "kmeans_train",
    "load_index",
    "pq_decode",
    "pq_encode",
    "pq_train",
    "query",
    "read_features",
    "residual",
    "save_index",
    "subic_loss",
    "train",
    "vq_assign",
    "write_features",
]
