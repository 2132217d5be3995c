"""Discrete latent bottleneck: nearest-code quantization with EMA codebooks.

Hard quantization snaps encoder outputs to their nearest codebook rows and the
straight-through estimator carries gradients across the snap. Soft embedding
maps probability vectors over the codebook to weighted averages of the rows,
which is what lets downstream models consume uncertain token predictions
without committing to a single code.

The codebook is maintained by exponential moving averages of cluster counts
and sums rather than by gradient descent. ``ema_update`` is the only mutating
operation; everything else here is pure and safe to share.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Module
from .tensor import DimensionError, Tensor

# explicit-difference distance computation is exact but materializes an
# [chunk, K, D] block; cap the block size instead of the row count
_CHUNK_ELEMENTS = 1 << 22


class Codebook(Module):
    """K learnable code vectors of dimension D plus their EMA statistics.

    ``embeddings`` row k always equals ``ema_sum[k]`` divided by the
    Laplace-smoothed ``ema_size[k]`` after an update. Statistics start at
    size 1 and sum equal to the initial embedding so the identity holds
    from the first step and unused codes decay gently instead of exploding.
    """

    def __init__(self, n_codes, dim, rng, decay=0.99, epsilon=1e-5,
                 init_scale=1.0, dtype=np.float32):
        super().__init__()
        if n_codes < 2:
            raise ValueError(f"codebook needs at least 2 codes, got {n_codes}")
        if dim < 1:
            raise ValueError(f"code dimension must be positive, got {dim}")
        if not (0.0 <= decay < 1.0):
            raise ValueError(f"EMA decay must lie in [0, 1): {decay}")
        self.decay = float(decay)
        self.epsilon = float(epsilon)
        init = (rng.standard_normal((n_codes, dim)) * init_scale).astype(dtype)
        self.register_buffer("embeddings", init)
        self.register_buffer("ema_size", np.ones(n_codes, dtype=dtype))
        self.register_buffer("ema_sum", init.copy())

    @property
    def n_codes(self):
        return self.embeddings.shape[0]

    @property
    def dim(self):
        return self.embeddings.shape[1]


def _as_array(z):
    return z.data if isinstance(z, Tensor) else np.asarray(z)


def quantize_hard(z, codebook: Codebook):
    """Nearest-code assignment under squared Euclidean distance.

    Returns ``(indices, z_q)`` where ``indices[i]`` is the lowest index among
    the codes minimizing ``||z[i] - e_k||^2`` and ``z_q[i]`` is that row,
    copied verbatim so idempotence is exact. Pure numpy; gradient flow is the
    caller's job via ``straight_through``.
    """
    zd = _as_array(z)
    emb = codebook.embeddings
    if zd.ndim != 2:
        raise DimensionError(f"quantize_hard expects [N, D] input, got shape {zd.shape}")
    if zd.shape[1] != emb.shape[1]:
        raise DimensionError(
            f"input dimension {zd.shape[1]} does not match codebook dimension {emb.shape[1]}"
        )
    n, d = zd.shape
    k = emb.shape[0]
    indices = np.empty(n, dtype=np.int64)
    step = max(1, _CHUNK_ELEMENTS // max(k * d, 1))
    for start in range(0, n, step):
        block = zd[start : start + step]
        diff = block[:, None, :] - emb[None, :, :]
        dist = np.einsum("nkd,nkd->nk", diff, diff)
        indices[start : start + step] = np.argmin(dist, axis=1)
    return indices, emb[indices].copy()


def embed_soft(probs, codebook: Codebook) -> Tensor:
    """Probability-weighted average of codebook rows, one output row per input.

    Differentiable in ``probs`` when given a Tensor. Each row must be a
    probability vector; sums off by more than 1e-4 or visibly negative
    entries are contract violations, not things to silently renormalize.
    """
    pt = probs if isinstance(probs, Tensor) else Tensor(np.asarray(probs))
    pd = pt.data
    if pd.ndim != 2 or pd.shape[1] != codebook.n_codes:
        raise DimensionError(
            f"embed_soft expects [N, {codebook.n_codes}] probabilities, got shape {pd.shape}"
        )
    sums = pd.sum(axis=1)
    bad = np.abs(sums - 1.0) > 1e-4
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ValueError(f"probability row {i} sums to {sums[i]:.6f}, not 1")
    if pd.min() < -1e-6:
        raise ValueError(f"negative probability {pd.min():.3e} in soft token")
    return T.matmul(pt, Tensor(codebook.embeddings.astype(pd.dtype, copy=False)))


def straight_through(z: Tensor, z_q) -> Tensor:
    """Forward value exactly ``z_q``, backward gradient passed unchanged to ``z``.

    Built as its own graph node rather than ``z + stopgrad(z_q - z)`` because
    the composed form is not bit-exact in floating point.
    """
    zq = _as_array(z_q)
    if z.shape != zq.shape:
        raise DimensionError(f"straight_through shapes differ: {z.shape} vs {zq.shape}")

    def backward(g):
        if z.requires_grad:
            z._accumulate(g)

    return T._node(zq.copy(), (z,), backward)


def ema_update(codebook: Codebook, z, indices):
    """Fold one batch of assignments into the codebook, in place.

    Cluster counts and sums decay toward the batch statistics, then rows are
    recomputed as sums over Laplace-smoothed counts, so empty clusters stay
    finite without any explicit dead-code reset. Mutates the codebook; do not
    run concurrently with anything reading it.
    """
    zd = _as_array(z)
    k = codebook.n_codes
    decay, eps = codebook.decay, codebook.epsilon
    counts = np.bincount(indices, minlength=k).astype(codebook.ema_size.dtype)
    sums = np.zeros_like(codebook.ema_sum)
    np.add.at(sums, indices, zd.astype(sums.dtype, copy=False))
    codebook.ema_size *= decay
    codebook.ema_size += (1.0 - decay) * counts
    codebook.ema_sum *= decay
    codebook.ema_sum += (1.0 - decay) * sums
    total = codebook.ema_size.sum()
    smoothed = (codebook.ema_size + eps) / (total + k * eps) * total
    codebook.embeddings[...] = codebook.ema_sum / smoothed[:, None]


def vq_losses(z: Tensor, z_q, beta) -> Tensor:
    """Commitment term ``beta * mean((z - stopgrad(z_q))^2)``.

    The codebook side has no gradient loss; EMA updates play that role.
    """
    zq = z_q if isinstance(z_q, Tensor) else Tensor(np.asarray(z_q))
    if z.shape != zq.shape:
        raise DimensionError(f"vq_losses shapes differ: {z.shape} vs {zq.shape}")
    diff = T.add(z, T.mul(T.stop_gradient(zq), -1.0))
    return T.mul(T.reduce_mean(T.power(diff, 2.0)), float(beta))
