"""The trainable indexing network.

Architecture (per sample, all layers fully connected, no biases)::

    x --W1--> a1 --relu--> z' --block softmax--> bt'
                                |                 |--C1--> softmax --> s'
                                |                 '--(residual link)
    r = Q x - R2 relu(R1 bt')
      or r = x when the residual link is disabled
    r --W2--> a2 --relu--> z --block softmax--> bt --C2--> softmax --> s

The first block selects an inverted-file bin: z' has ``bin_blocks``
blocks of ``n_bins`` entries each (one block for a flat index, two for a
multi-index).  The second block is the compact feature encoder with M
blocks of K entries.  At test time each block collapses to the argmax
one-hot; at training time the relaxed codes bt' and bt feed the
classifiers and the entropy regularizers.

Objectives:
  F11 / F10:  mean_i [alpha * ce(s', y) + ce(s, y)]    (alpha = 1 / 0)
  F2:         mean_i ce(s' + s, y)
plus the code-shaping term: the combined entropy loss of the bt' batch
weighted by (mu1, gamma1) and of the bt batch weighted by (mu2, gamma2).

Gradients are computed analytically (manual backprop over the graph
above) and are verified against central finite differences in the tests.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .subic_encoder import (
    RelaxedBlockCode,
    SubicLossParams,
    _LOG2_E,
    softmax_rows,
    softmax_vjp,
)
from .core_math import LOG_CLAMP

log = logging.getLogger(__name__)

MATRIX_NAMES = ("W1", "Q", "R1", "R2", "W2", "C1", "C2")
OBJECTIVES = ("F11", "F10", "F2")
VARIANTS = ("subic_i", "subic_j", "subic_r", "subic_imi")


@dataclass
class NetworkConfig:
    d: int  # input feature dimension
    n_bins: int  # bin-selector block width (N flat, K_imi per axis)
    M: int  # encoder blocks
    K: int  # encoder block size
    n_classes: int
    bin_blocks: int = 1  # 1 = flat inverted file, 2 = multi-index
    residual_enabled: bool = False
    d_r: int | None = None  # residual-space dim, defaults to d
    h: int | None = None  # residual hidden dim, defaults to d
    objective: str = "F11"
    mu1: float = 0.0
    gamma1: float = 0.0
    mu2: float = 0.0
    gamma2: float = 0.0
    normalize_input: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.bin_blocks not in (1, 2):
            raise ValueError("bin_blocks must be 1 or 2")
        if min(self.d, self.n_bins, self.M, self.K, self.n_classes) < 1:
            raise ValueError("all dimensions must be >= 1")
        if min(self.mu1, self.gamma1, self.mu2, self.gamma2) < 0:
            raise ValueError("entropy-loss weights must be nonnegative")
        if self.d_r is None:
            self.d_r = self.d
        if self.h is None:
            self.h = self.d

    @property
    def alpha(self) -> int:
        """Selector on the bin-classifier term: 1 under F11, 0 otherwise."""
        return 1 if self.objective == "F11" else 0

    @property
    def selector_width(self) -> int:
        return self.bin_blocks * self.n_bins

    @property
    def code_width(self) -> int:
        return self.M * self.K

    @property
    def encoder_input_dim(self) -> int:
        return self.d_r if self.residual_enabled else self.d

    @property
    def total_bins(self) -> int:
        return self.n_bins if self.bin_blocks == 1 else self.n_bins**2

    def selector_loss_params(self) -> SubicLossParams:
        return SubicLossParams(mu=self.mu1, gamma=self.gamma1)

    def encoder_loss_params(self) -> SubicLossParams:
        return SubicLossParams(mu=self.mu2, gamma=self.gamma2)

    @classmethod
    def for_variant(cls, variant: str, **kw) -> "NetworkConfig":
        """Canonical settings for the four pipeline variants.

        subic_i: F11, no residual, flat bins (the selector and encoder
                 train independently).
        subic_r: F10, residual link on; the caller supplies a pretrained
                 bin block and freezes it.
        subic_j: F2, no residual (joint classifier on s' + s).
        subic_imi: F11, no residual, two bin-selector blocks.
        """
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        settings = {
            "subic_i": dict(objective="F11", residual_enabled=False, bin_blocks=1),
            "subic_j": dict(objective="F2", residual_enabled=False, bin_blocks=1),
            "subic_r": dict(objective="F10", residual_enabled=True, bin_blocks=1),
            "subic_imi": dict(objective="F11", residual_enabled=False, bin_blocks=2),
        }[variant]
        return cls(**{**kw, **settings})


def shape_of(name: str, cfg: NetworkConfig):
    return {
        "W1": (cfg.selector_width, cfg.d),
        "Q": (cfg.d_r, cfg.d),
        "R1": (cfg.h, cfg.selector_width),
        "R2": (cfg.d_r, cfg.h),
        "W2": (cfg.code_width, cfg.encoder_input_dim),
        "C1": (cfg.n_classes, cfg.selector_width),
        "C2": (cfg.n_classes, cfg.code_width),
    }[name]


@dataclass
class NetworkParams:
    W1: np.ndarray
    W2: np.ndarray
    C1: np.ndarray
    C2: np.ndarray
    Q: np.ndarray | None = None
    R1: np.ndarray | None = None
    R2: np.ndarray | None = None
    frozen: frozenset = field(default_factory=frozenset)

    def matrices(self) -> dict:
        """Present matrices, keyed by name, in canonical order."""
        out = {}
        for name in MATRIX_NAMES:
            m = getattr(self, name)
            if m is not None:
                out[name] = m
        return out

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            **{n: (m.copy() if m is not None else None)
               for n, m in ((name, getattr(self, name)) for name in MATRIX_NAMES)},
            frozen=self.frozen,
        )

    def check_shapes(self, cfg: NetworkConfig):
        for name in MATRIX_NAMES:
            m = getattr(self, name)
            if name in ("Q", "R1", "R2") and not cfg.residual_enabled:
                continue
            if m is None:
                raise ValueError(f"missing matrix {name}")
            if m.shape != shape_of(name, cfg):
                raise ValueError(
                    f"{name} has shape {m.shape}, expected {shape_of(name, cfg)}"
                )


def init_params(cfg: NetworkConfig, rng) -> NetworkParams:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out)), drawn in a fixed
    matrix order so a given seed always produces the same network."""

    def draw(name):
        rows, cols = shape_of(name, cfg)
        bound = np.sqrt(6.0 / (rows + cols))
        return rng.uniform(-bound, bound, size=(rows, cols))

    mats = {}
    for name in MATRIX_NAMES:
        if name in ("Q", "R1", "R2") and not cfg.residual_enabled:
            mats[name] = None
        else:
            mats[name] = draw(name)
    return NetworkParams(**mats)


@dataclass
class ForwardTrace:
    """Per-sample activations, including the pre-ReLU caches backprop needs."""

    x: np.ndarray
    a1: np.ndarray  # W1 x
    z_prime: np.ndarray  # relu(a1)
    bt_prime: RelaxedBlockCode  # block softmax of z', (bin_blocks, n_bins)
    r: np.ndarray
    a2: np.ndarray  # W2 r
    z: np.ndarray  # relu(a2)
    bt: RelaxedBlockCode  # block softmax of z, (M, K)
    u: np.ndarray | None = None  # R1 bt' (residual only)
    v: np.ndarray | None = None  # relu(u)
    g1: np.ndarray | None = None  # C1 bt'  (train mode)
    g2: np.ndarray | None = None  # C2 bt
    s_prime: np.ndarray | None = None
    s: np.ndarray | None = None


@dataclass
class BatchTrace:
    """Batched activations; row i belongs to sample i."""

    X: np.ndarray
    A1: np.ndarray
    Zp: np.ndarray
    BTp: np.ndarray  # (B, selector_width), rows of block softmaxes
    R: np.ndarray
    A2: np.ndarray
    Z: np.ndarray
    BT: np.ndarray  # (B, code_width)
    U: np.ndarray | None = None
    V: np.ndarray | None = None
    G1: np.ndarray | None = None
    G2: np.ndarray | None = None
    Sp: np.ndarray | None = None
    S: np.ndarray | None = None

    @property
    def batch_size(self):
        return self.X.shape[0]


def _block_softmax_rows(A, n_blocks, width):
    B = A.shape[0]
    return softmax_rows(A.reshape(B, n_blocks, width)).reshape(B, n_blocks * width)


def forward_batch(X, params: NetworkParams, cfg: NetworkConfig, train: bool) -> BatchTrace:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cfg.d:
        raise ValueError(f"batch has shape {X.shape}, expected (B, {cfg.d})")
    params.check_shapes(cfg)
    if cfg.normalize_input:
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        X = X / np.where(norms > 0, norms, 1.0)

    A1 = X @ params.W1.T
    if not np.isfinite(A1).all():
        raise ValueError("non-finite activation in the bin-selection block")
    Zp = np.maximum(A1, 0.0)
    BTp = _block_softmax_rows(Zp, cfg.bin_blocks, cfg.n_bins)

    U = V = None
    if cfg.residual_enabled:
        U = BTp @ params.R1.T
        V = np.maximum(U, 0.0)
        R = X @ params.Q.T - V @ params.R2.T
    else:
        R = X

    A2 = R @ params.W2.T
    if not np.isfinite(A2).all():
        raise ValueError("non-finite activation in the encoder block")
    Z = np.maximum(A2, 0.0)
    BT = _block_softmax_rows(Z, cfg.M, cfg.K)

    G1 = G2 = Sp = S = None
    if train:
        G1 = BTp @ params.C1.T
        Sp = softmax_rows(G1)
        G2 = BT @ params.C2.T
        S = softmax_rows(G2)

    return BatchTrace(X=X, A1=A1, Zp=Zp, BTp=BTp, U=U, V=V, R=R, A2=A2, Z=Z,
                      BT=BT, G1=G1, G2=G2, Sp=Sp, S=S)


def forward(x, params: NetworkParams, cfg: NetworkConfig, mode: str = "train") -> ForwardTrace:
    """Single-sample forward pass; ``mode`` is "train" or "test"."""
    if mode not in ("train", "test"):
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (cfg.d,):
        raise ValueError(f"feature has shape {x.shape}, expected ({cfg.d},)")
    b = forward_batch(x[None, :], params, cfg, train=(mode == "train"))
    return ForwardTrace(
        x=b.X[0],
        a1=b.A1[0],
        z_prime=b.Zp[0],
        bt_prime=RelaxedBlockCode(b.BTp[0].reshape(cfg.bin_blocks, cfg.n_bins)),
        u=None if b.U is None else b.U[0],
        v=None if b.V is None else b.V[0],
        r=b.R[0],
        a2=b.A2[0],
        z=b.Z[0],
        bt=RelaxedBlockCode(b.BT[0].reshape(cfg.M, cfg.K)),
        g1=None if b.G1 is None else b.G1[0],
        g2=None if b.G2 is None else b.G2[0],
        s_prime=None if b.Sp is None else b.Sp[0],
        s=None if b.S is None else b.S[0],
    )


def cross_entropy(p, c: int, C: int) -> float:
    """-log2(p[c]) / log2(C); scaled so a uniform prediction costs exactly 1."""
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= c < C:
        raise IndexError(f"class {c} out of range [0, {C})")
    return float(-np.log2(max(p[c], LOG_CLAMP)) / np.log2(C))


def _stack_traces(traces):
    if len(traces) == 0:
        raise ValueError("empty batch")
    t0 = traces[0]
    kw = dict(
        X=np.stack([t.x for t in traces]),
        A1=np.stack([t.a1 for t in traces]),
        Zp=np.stack([t.z_prime for t in traces]),
        BTp=np.stack([t.bt_prime.flat() for t in traces]),
        R=np.stack([t.r for t in traces]),
        A2=np.stack([t.a2 for t in traces]),
        Z=np.stack([t.z for t in traces]),
        BT=np.stack([t.bt.flat() for t in traces]),
    )
    if t0.u is not None:
        kw["U"] = np.stack([t.u for t in traces])
        kw["V"] = np.stack([t.v for t in traces])
    if t0.s is not None:
        kw["G1"] = np.stack([t.g1 for t in traces])
        kw["G2"] = np.stack([t.g2 for t in traces])
        kw["Sp"] = np.stack([t.s_prime for t in traces])
        kw["S"] = np.stack([t.s for t in traces])
    return BatchTrace(**kw)


def _rows_ce(P, y, C):
    """Row-wise -log2(P[i, y_i]) / log2(C)."""
    picked = np.maximum(P[np.arange(P.shape[0]), y], LOG_CLAMP)
    return -np.log(picked) / np.log(C)


def _batch_task_loss(b: BatchTrace, y, cfg: NetworkConfig) -> float:
    if b.S is None:
        raise ValueError("task loss needs a train-mode forward pass")
    C = cfg.n_classes
    if cfg.objective == "F2":
        summed = b.Sp + b.S
        picked = np.clip(summed[np.arange(b.batch_size), y], LOG_CLAMP, 2.0)
        return float(np.mean(-np.log(picked) / np.log(C)))
    ce_s = _rows_ce(b.S, y, C)
    if cfg.alpha:
        return float(np.mean(cfg.alpha * _rows_ce(b.Sp, y, C) + ce_s))
    return float(np.mean(ce_s))


def _group_entropy_loss(flat, n_blocks, width, mu, gamma) -> float:
    """Combined entropy loss of a batch of relaxed codes given as flat rows."""
    B = flat.shape[0]
    P = flat.reshape(B, n_blocks, width)
    logs = np.log2(np.maximum(P, LOG_CLAMP))
    per_sample = -(P * logs).sum()  # sum of all block entropies over batch
    mean = P.mean(axis=0)
    batch_term = (mean * np.log2(np.maximum(mean, LOG_CLAMP))).sum()
    return float(mu / B * per_sample + gamma * batch_term)


def _batch_omega(b: BatchTrace, cfg: NetworkConfig) -> float:
    return _group_entropy_loss(b.BTp, cfg.bin_blocks, cfg.n_bins, cfg.mu1, cfg.gamma1) + \
        _group_entropy_loss(b.BT, cfg.M, cfg.K, cfg.mu2, cfg.gamma2)


def loss_L1(traces, labels, alpha: int) -> float:
    """mean_i [alpha * ce(s', y) + ce(s, y)]"""
    b = _stack_traces(traces)
    y = np.asarray(labels, dtype=np.int64)
    if b.S is None:
        raise ValueError("task loss needs train-mode traces")
    C = b.S.shape[1]
    return float(np.mean(alpha * _rows_ce(b.Sp, y, C) + _rows_ce(b.S, y, C)))


def loss_L2(traces, labels) -> float:
    """mean_i ce(s' + s, y); the argument sums to 2, so the loss can dip to
    -1/log2(C) when both classifiers saturate on the right class."""
    b = _stack_traces(traces)
    y = np.asarray(labels, dtype=np.int64)
    if b.S is None:
        raise ValueError("task loss needs train-mode traces")
    C = b.S.shape[1]
    picked = np.clip((b.Sp + b.S)[np.arange(len(traces)), y], LOG_CLAMP, 2.0)
    return float(np.mean(-np.log(picked) / np.log(C)))


def loss_omega(traces, hyper) -> float:
    """Entropy regularizer: combined loss of the bt' batch under
    (mu1, gamma1) plus the bt batch under (mu2, gamma2).  ``hyper`` is any
    object with those four attributes (a NetworkConfig works)."""
    b = _stack_traces(traces)
    t0 = traces[0]
    return _group_entropy_loss(
        b.BTp, t0.bt_prime.M, t0.bt_prime.K, hyper.mu1, hyper.gamma1
    ) + _group_entropy_loss(b.BT, t0.bt.M, t0.bt.K, hyper.mu2, hyper.gamma2)


def loss_total(traces, labels, cfg: NetworkConfig) -> float:
    b = _stack_traces(traces)
    y = np.asarray(labels, dtype=np.int64)
    return _batch_task_loss(b, y, cfg) + _batch_omega(b, cfg)


def batch_loss(b: BatchTrace, labels, cfg: NetworkConfig) -> float:
    y = np.asarray(labels, dtype=np.int64)
    return _batch_task_loss(b, y, cfg) + _batch_omega(b, cfg)


def _classifier_logit_grads(b: BatchTrace, y, cfg: NetworkConfig):
    """d task-loss / d (G1, G2).  For F1x these are the usual
    softmax-cross-entropy deltas; for F2 the shared denominator couples
    the two heads."""
    B = b.batch_size
    C = cfg.n_classes
    rows = np.arange(B)
    Y = np.zeros((B, C))
    Y[rows, y] = 1.0
    lnC = np.log(C)
    if cfg.objective == "F2":
        peak = (b.Sp + b.S)[rows, y]
        live = ((peak > LOG_CLAMP) & (peak < 2.0)).astype(np.float64)
        f2 = live * b.S[rows, y] / (np.maximum(peak, LOG_CLAMP) * lnC * B)
        f1 = live * b.Sp[rows, y] / (np.maximum(peak, LOG_CLAMP) * lnC * B)
        dG2 = f2[:, None] * (b.S - Y)
        dG1 = f1[:, None] * (b.Sp - Y)
        return dG1, dG2
    dG2 = (b.S - Y) / (lnC * B)
    dG1 = cfg.alpha * (b.Sp - Y) / (lnC * B)
    return dG1, dG2


def _group_entropy_prob_grad(flat, n_blocks, width, mu, gamma):
    """d combined-entropy-loss / d probabilities, as flat rows."""
    B = flat.shape[0]
    P = flat.reshape(B, n_blocks, width)
    g = np.zeros_like(P)
    if mu:
        g += mu / B * (-(np.log2(np.maximum(P, LOG_CLAMP)) + _LOG2_E))
    if gamma:
        mean = P.mean(axis=0)
        g += gamma / B * (np.log2(np.maximum(mean, LOG_CLAMP)) + _LOG2_E)
    return g.reshape(B, n_blocks * width)


def _through_block_softmax(P_flat, dP_flat, n_blocks, width):
    """Push a probability-space gradient through the block softmax."""
    B = P_flat.shape[0]
    P = P_flat.reshape(B, n_blocks, width)
    V = dP_flat.reshape(B, n_blocks, width)
    return softmax_vjp(P, V).reshape(B, n_blocks * width)


def loss_and_grads(b: BatchTrace, labels, params: NetworkParams, cfg: NetworkConfig):
    """Total loss and its gradient for every non-frozen matrix."""
    if b.S is None:
        raise ValueError("backward needs a train-mode forward pass")
    y = np.asarray(labels, dtype=np.int64)
    total = _batch_task_loss(b, y, cfg) + _batch_omega(b, cfg)

    dG1, dG2 = _classifier_logit_grads(b, y, cfg)

    grads = {"C1": dG1.T @ b.BTp, "C2": dG2.T @ b.BT}

    # encoder code: classifier pullback plus entropy terms
    dBT = dG2 @ params.C2
    dBT += _group_entropy_prob_grad(b.BT, cfg.M, cfg.K, cfg.mu2, cfg.gamma2)
    dZ = _through_block_softmax(b.BT, dBT, cfg.M, cfg.K)
    dA2 = dZ * (b.A2 > 0)
    grads["W2"] = dA2.T @ b.R
    dR = dA2 @ params.W2

    dBTp = dG1 @ params.C1
    dBTp += _group_entropy_prob_grad(b.BTp, cfg.bin_blocks, cfg.n_bins, cfg.mu1, cfg.gamma1)

    if cfg.residual_enabled:
        grads["Q"] = dR.T @ b.X
        dV = -(dR @ params.R2)
        grads["R2"] = -(dR.T @ b.V)
        dU = dV * (b.U > 0)
        grads["R1"] = dU.T @ b.BTp
        dBTp += dU @ params.R1

    dZp = _through_block_softmax(b.BTp, dBTp, cfg.bin_blocks, cfg.n_bins)
    dA1 = dZp * (b.A1 > 0)
    grads["W1"] = dA1.T @ b.X

    for name in list(grads):
        if name in params.frozen:
            grads[name] = np.zeros_like(grads[name])
    return total, grads


def backward(traces, labels, params: NetworkParams, cfg: NetworkConfig) -> dict:
    """Analytic gradients of loss_total w.r.t. every matrix; frozen
    matrices get exact zeros.  Traces must come from train-mode forward."""
    b = _stack_traces(traces)
    if b.S is None:
        raise ValueError("backward needs train-mode traces (classifier caches missing)")
    _, grads = loss_and_grads(b, labels, params, cfg)
    return grads


@dataclass
class TrainConfig:
    batch_size: int
    num_batches: int
    learning_rate: float
    momentum: float = 0.9
    seed: int = 0
    weight_init: str = "glorot-uniform"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.num_batches < 0:
            raise ValueError("num_batches must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.weight_init != "glorot-uniform":
            raise ValueError(f"unknown weight init {self.weight_init!r}")


def train(data, cfg: NetworkConfig, tcfg: TrainConfig,
          init: NetworkParams | None = None) -> NetworkParams:
    """SGD with momentum over num_batches mini-batches sampled with
    replacement from a stream seeded by tcfg.seed.

    Pass ``init`` to continue from existing parameters, e.g. a params
    object carrying a pretrained, frozen bin-selection block.
    """
    X = np.asarray(data.vectors, dtype=np.float64)
    if data.labels is None:
        raise ValueError("training needs labeled features")
    y = np.asarray(data.labels, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= cfg.n_classes):
        raise ValueError("labels out of range")
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty training set")

    rng = np.random.default_rng(tcfg.seed)
    params = init.copy() if init is not None else init_params(cfg, rng)
    params.check_shapes(cfg)
    velocity = {name: np.zeros_like(m) for name, m in params.matrices().items()}

    log_every = max(1, tcfg.num_batches // 10)
    for step in range(tcfg.num_batches):
        idx = rng.integers(0, n, size=tcfg.batch_size)
        b = forward_batch(X[idx], params, cfg, train=True)
        loss, grads = loss_and_grads(b, y[idx], params, cfg)
        if not np.isfinite(loss):
            raise RuntimeError(
                f"training diverged at batch {step}: loss={loss} "
                f"(learning_rate={tcfg.learning_rate})"
            )
        for name, g in grads.items():
            if name in params.frozen:
                continue
            v = velocity[name]
            v *= tcfg.momentum
            v -= tcfg.learning_rate * g
            mat = getattr(params, name)
            mat += v
        if step % log_every == 0 or step == tcfg.num_batches - 1:
            log.info("batch %d/%d loss %.6f", step, tcfg.num_batches, loss)
    return params
