"""Dense numeric primitives shared by every other module.

All computations run in float64.  Reductions rely on numpy's fixed
left-to-right pairwise summation, so identical inputs give identical
bits on every run.
"""

import numpy as np

# Probabilities below this are clamped inside logarithms only, so that
# 0 * log2(0) evaluates to 0 and float underflow cannot produce NaN.
LOG_CLAMP = 1e-12

# Tolerance on simplex membership (sum-to-one check).
PROB_SUM_TOL = 1e-6


def matvec(m, v):
    """Matrix-vector product with shape validation."""
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ValueError(f"dimension mismatch: {m.shape} x {v.shape}")
    return m @ v


def relu(v):
    """Elementwise max(0, x)."""
    return np.maximum(np.asarray(v, dtype=np.float64), 0.0)


def softmax(z):
    """Numerically safe softmax: exponentials are taken after subtracting
    the max entry, so arbitrarily large finite logits cannot overflow."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def entropy_bits(p):
    """Shannon entropy in bits, -sum(p * log2 p), with 0*log2(0) := 0.

    Lies in [0, log2 K] for a K-way distribution: 0 for a deterministic
    (one-hot) distribution, log2 K for the uniform one.
    """
    p = np.asarray(p, dtype=np.float64)
    return float(-(p * np.log2(np.maximum(p, LOG_CLAMP))).sum())


def argmax_tiebreak(v):
    """Index of the largest entry; exact ties resolve to the smallest index."""
    v = np.asarray(v)
    if v.size == 0:
        raise ValueError("argmax of an empty vector")
    return int(np.argmax(v))


def seeded_rng(seed):
    """Deterministic random stream (PCG64); same seed, same sequence."""
    return np.random.default_rng(seed)


def check_prob_vector(p, tol=PROB_SUM_TOL):
    """Raise if p is not a valid probability vector (within tol)."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {p.shape}")
    if (p < 0).any():
        raise ValueError("probability vector has negative entries")
    s = p.sum()
    if abs(s - 1.0) > tol:
        raise ValueError(f"probability vector sums to {s}, not 1")
    return p
