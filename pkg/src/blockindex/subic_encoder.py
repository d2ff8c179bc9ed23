"""Block-structured codes and the entropy losses that shape them.

A length-M*K activation vector is split into M blocks of K entries.  At
training time each block passes through a softmax, giving a relaxed code
whose blocks live on the probability simplex; at test time each block is
collapsed to the one-hot vector of its argmax.

Two losses steer the relaxed codes: a per-sample entropy loss that pulls
every block toward a one-hot vertex, and a negative batch-entropy loss
that pushes the batch-mean block toward uniform so all K values of each
block get used.  Their weighted sum (weights mu and gamma) is the
combined code-shaping loss.
"""

from dataclasses import dataclass

import numpy as np

from .core_math import LOG_CLAMP, argmax_tiebreak, entropy_bits

# d/dp [p * log2(p)] = log2(p) + 1/ln(2); this is the constant term.
_LOG2_E = 1.0 / np.log(2.0)


@dataclass
class BlockCode:
    """Test-time code: M one-hot blocks of size K, stored as argmax indices."""

    indices: np.ndarray  # (M,)
    block_size: int  # K

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ValueError("indices must be 1-D")
        if idx.size and (idx.min() < 0 or idx.max() >= self.block_size):
            raise ValueError(f"indices out of range [0, {self.block_size})")
        self.indices = idx

    @property
    def M(self):
        return self.indices.shape[0]

    def to_dense(self) -> np.ndarray:
        """The explicit 0/1 vector of length M*K."""
        out = np.zeros(self.M * self.block_size, dtype=np.float64)
        out[np.arange(self.M) * self.block_size + self.indices] = 1.0
        return out


@dataclass
class RelaxedBlockCode:
    """Training-time code: M rows, each a K-way probability vector."""

    blocks: np.ndarray  # (M, K)

    def __post_init__(self):
        b = np.asarray(self.blocks, dtype=np.float64)
        if b.ndim != 2:
            raise ValueError(f"blocks must be (M, K), got shape {b.shape}")
        self.blocks = b

    @property
    def M(self):
        return self.blocks.shape[0]

    @property
    def K(self):
        return self.blocks.shape[1]

    def flat(self) -> np.ndarray:
        return self.blocks.reshape(-1)


@dataclass
class SubicLossParams:
    mu: float
    gamma: float

    def __post_init__(self):
        if self.mu < 0 or self.gamma < 0:
            raise ValueError("loss weights must be nonnegative")


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; works on any (..., K) array."""
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def block_softmax(z, M: int, K: int) -> RelaxedBlockCode:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (M * K,):
        raise ValueError(f"activation has shape {z.shape}, expected ({M * K},)")
    return RelaxedBlockCode(blocks=softmax_rows(z.reshape(M, K)))


def block_one_hot(z, M: int, K: int) -> BlockCode:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (M * K,):
        raise ValueError(f"activation has shape {z.shape}, expected ({M * K},)")
    blocks = z.reshape(M, K)
    idx = np.array([argmax_tiebreak(blocks[m]) for m in range(M)], dtype=np.int64)
    return BlockCode(indices=idx, block_size=K)


def entropy_loss(bt: RelaxedBlockCode) -> float:
    """Sum of per-block entropies, in [0, M*log2(K)]."""
    return float(sum(entropy_bits(bt.blocks[m]) for m in range(bt.M)))


def batch_entropy_loss(batch) -> float:
    """Negated entropy of the batch-mean code, in [-M*log2(K), 0]."""
    mean = _batch_mean(batch)
    return float(-sum(entropy_bits(mean[m]) for m in range(mean.shape[0])))


def subic_loss(batch, p: SubicLossParams) -> float:
    """(mu / |batch|) * sum of entropy losses + gamma * batch-entropy loss."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    per_sample = sum(entropy_loss(bt) for bt in batch)
    return p.mu / len(batch) * per_sample + p.gamma * batch_entropy_loss(batch)


def _batch_mean(batch) -> np.ndarray:
    if len(batch) == 0:
        raise ValueError("empty batch")
    shape = batch[0].blocks.shape
    acc = np.zeros(shape, dtype=np.float64)
    for bt in batch:
        if bt.blocks.shape != shape:
            raise ValueError("batch members disagree on (M, K)")
        acc += bt.blocks
    return acc / len(batch)


# --- gradients with respect to the pre-softmax activations ---------------
#
# Every loss below is a function of softmax outputs, so its activation
# gradient is the probability-space gradient pushed through the softmax
# Jacobian: for a block with probabilities p and upstream v,
# dz = p * (v - <p, v>).


def softmax_vjp(p: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Softmax Jacobian applied row-wise: p*(v - sum(p*v))."""
    dot = (p * v).sum(axis=-1, keepdims=True)
    return p * (v - dot)


def entropy_grad_wrt_probs(p: np.ndarray) -> np.ndarray:
    """d entropy_bits / dp, elementwise; log arguments clamped at LOG_CLAMP."""
    return -(np.log2(np.maximum(p, LOG_CLAMP)) + _LOG2_E)


def entropy_loss_logit_grad(bt: RelaxedBlockCode) -> np.ndarray:
    """(M, K) gradient of entropy_loss w.r.t. the block activations."""
    p = bt.blocks
    return softmax_vjp(p, entropy_grad_wrt_probs(p))


def batch_entropy_loss_logit_grad(batch) -> list:
    """Per-sample (M, K) gradients of batch_entropy_loss."""
    mean = _batch_mean(batch)
    # loss = -sum E(mean) = sum mean*log2(mean); d/dmean = log2(mean) + 1/ln2
    v = (np.log2(np.maximum(mean, LOG_CLAMP)) + _LOG2_E) / len(batch)
    return [softmax_vjp(bt.blocks, v) for bt in batch]


def subic_loss_logit_grad(batch, p: SubicLossParams) -> list:
    """Per-sample (M, K) gradients of subic_loss."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    batch_grads = batch_entropy_loss_logit_grad(batch)
    scale = p.mu / len(batch)
    return [
        scale * entropy_loss_logit_grad(bt) + p.gamma * g
        for bt, g in zip(batch, batch_grads)
    ]
