"""Independent brute-force reference implementations used only by tests.

Everything here is deliberately written as plain loops so it shares no code
path with the library.
"""

from __future__ import annotations

import numpy as np


def naive_conv2d(x, w, b, stride, padding):
    n, c, h, wid = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wid + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    patch = xp[ni, :, yi * stride : yi * stride + k, xi * stride : xi * stride + k]
                    out[ni, oi, yi, xi] = (patch * w[oi]).sum() + (b[oi] if b is not None else 0.0)
    return out


def naive_conv_transpose2d(x, w, b, stride, padding):
    n, c, h, wid = x.shape
    _, o, k, _ = w.shape
    ho = (h - 1) * stride - 2 * padding + k
    wo = (wid - 1) * stride - 2 * padding + k
    full = np.zeros((n, o, ho + 2 * padding, wo + 2 * padding), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for yi in range(h):
                for xi in range(wid):
                    full[ni, :, yi * stride : yi * stride + k, xi * stride : xi * stride + k] += (
                        x[ni, ci, yi, xi] * w[ci]
                    )
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if b is not None:
        out = out + b.reshape(1, o, 1, 1)
    return out


def scalar_depth_metrics(pred, gt, valid):
    """Per-pixel python loop version of the depth metric suite."""
    se = []
    rel = []
    l10 = []
    d1 = d2 = d3 = 0
    n = 0
    h, w = pred.shape
    for i in range(h):
        for j in range(w):
            if not valid[i, j]:
                continue
            p, g = float(pred[i, j]), float(gt[i, j])
            n += 1
            se.append((p - g) ** 2)
            rel.append(abs(p - g) / g)
            l10.append(abs(np.log10(p) - np.log10(g)))
            ratio = max(p / g, g / p)
            d1 += ratio < 1.25
            d2 += ratio < 1.25**2
            d3 += ratio < 1.25**3
    return {
        "rmse": float(np.sqrt(np.mean(se))),
        "rel": float(np.mean(rel)),
        "log10": float(np.mean(l10)),
        "delta1": d1 / n,
        "delta2": d2 / n,
        "delta3": d3 / n,
    }


def ema_codebook_reference(init_embeddings, assignments_per_step, decay, epsilon):
    """Plain-python EMA codebook recursion, one scalar at a time.

    ``assignments_per_step`` is a list of (indices, vectors) batches. Returns
    the embeddings after all updates as a list of lists. Shares no code with
    the library implementation.
    """
    k = len(init_embeddings)
    d = len(init_embeddings[0])
    size = [1.0] * k
    summ = [[float(v) for v in row] for row in init_embeddings]
    emb = [[float(v) for v in row] for row in init_embeddings]
    for indices, vectors in assignments_per_step:
        counts = [0.0] * k
        batch_sums = [[0.0] * d for _ in range(k)]
        for idx, vec in zip(indices, vectors):
            counts[idx] += 1.0
            for j in range(d):
                batch_sums[idx][j] += float(vec[j])
        for i in range(k):
            size[i] = decay * size[i] + (1.0 - decay) * counts[i]
            for j in range(d):
                summ[i][j] = decay * summ[i][j] + (1.0 - decay) * batch_sums[i][j]
        total = sum(size)
        for i in range(k):
            smoothed = (size[i] + epsilon) / (total + k * epsilon) * total
            for j in range(d):
                emb[i][j] = summ[i][j] / smoothed
    return emb, size
