"""Asymmetric distance computation.

A query residual is compared against compressed database codes through
per-block lookup tables: entry [m][k] holds the squared distance between
the query's m-th coordinate block and sub-codeword k.  The distance to a
code is then M table lookups and additions, which equals the inner
product of the stacked tables with the code's block-one-hot form.

Tables are kept in float64 so that the lookup path agrees with a direct
decode-then-distance computation to full precision.
"""

from dataclasses import dataclass

import numpy as np

from .codebooks import PQCode, ProductCodebook


@dataclass
class DistanceLUT:
    tables: np.ndarray  # (M, K) float64, nonnegative
    bin_id: int = -1

    @property
    def M(self):
        return self.tables.shape[0]

    @property
    def K(self):
        return self.tables.shape[1]


def build_lut(r_query, pcb: ProductCodebook, bin_id: int = -1) -> DistanceLUT:
    """Per-block squared distances from the query residual to every sub-codeword."""
    r = np.asarray(r_query, dtype=np.float64)
    if r.shape != (pcb.dim,):
        raise ValueError(f"residual has shape {r.shape}, codebook dim is {pcb.dim}")
    offs = pcb.offsets
    tables = np.empty((pcb.M, pcb.K), dtype=np.float64)
    for m in range(pcb.M):
        diff = pcb.sub_codebooks[m].centroids - r[offs[m] : offs[m + 1]]
        tables[m] = (diff**2).sum(axis=1)
    return DistanceLUT(tables=tables, bin_id=bin_id)


def _code_matrix(codes, M):
    if isinstance(codes, np.ndarray):
        c = codes
    else:
        c = np.asarray([c.indices if isinstance(c, PQCode) else c for c in codes])
    if c.size == 0:
        return np.zeros((0, M), dtype=np.int64)
    if c.ndim != 2 or c.shape[1] != M:
        raise ValueError(f"codes have shape {c.shape}, expected (n, {M})")
    return c


def adc_distance(lut: DistanceLUT, code) -> float:
    """Approximate squared distance: sum of one table entry per block."""
    idx = code.indices if isinstance(code, PQCode) else np.asarray(code)
    if idx.shape != (lut.M,):
        raise ValueError(f"code has shape {idx.shape}, LUT has {lut.M} blocks")
    return float(lut.tables[np.arange(lut.M), idx].sum())


def adc_scan(lut: DistanceLUT, codes) -> np.ndarray:
    """adc_distance over many codes, in input order."""
    c = _code_matrix(codes, lut.M)
    if c.shape[0] == 0:
        return np.zeros(0, dtype=np.float64)
    return lut.tables[np.arange(lut.M)[None, :], c].sum(axis=1)
