"""Hand-rolled 2d resampling plus box crop/paste helpers.

Nearest and bilinear modes cover everything the codecs and the
no-learning baseline need; both use the half-pixel-center convention
(sample i maps to source coordinate (i + 0.5) * in / out - 0.5).
"""

from __future__ import annotations

import numpy as np


def _nearest_map(n_in: int, n_out: int) -> np.ndarray:
    idx = ((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64)
    return np.minimum(idx, n_in - 1)


def resize_nearest(arr: np.ndarray, out_hw) -> np.ndarray:
    """Nearest-neighbor resample of the last two axes."""
    h, w = arr.shape[-2:]
    oh, ow = out_hw
    if oh < 1 or ow < 1:
        raise ValueError(f"output size must be positive, got {out_hw}")
    return arr[..., _nearest_map(h, oh)[:, None], _nearest_map(w, ow)[None, :]]


def _linear_weights(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(arr: np.ndarray, out_hw) -> np.ndarray:
    """Bilinear resample of the last two axes; returns float64/float32 per input."""
    h, w = arr.shape[-2:]
    oh, ow = out_hw
    if oh < 1 or ow < 1:
        raise ValueError(f"output size must be positive, got {out_hw}")
    arr = np.asarray(arr, dtype=np.result_type(arr.dtype, np.float32))
    r_lo, r_hi, r_f = _linear_weights(h, oh)
    c_lo, c_hi, c_f = _linear_weights(w, ow)
    top = arr[..., r_lo, :] * (1.0 - r_f)[:, None] + arr[..., r_hi, :] * r_f[:, None]
    left = top[..., :, c_lo] * (1.0 - c_f) + top[..., :, c_hi] * c_f
    return left


def box_to_pixels(box, image_hw):
    """Normalized (x0, y0, x1, y1) to a half-open pixel rect (r0, c0, r1, c1).

    Degenerate boxes are widened to one pixel so crops never go empty.
    """
    x0, y0, x1, y1 = box
    h, w = image_hw
    c0 = int(np.clip(np.floor(x0 * w + 1e-9), 0, w - 1))
    c1 = int(np.clip(np.ceil(x1 * w - 1e-9), c0 + 1, w))
    r0 = int(np.clip(np.floor(y0 * h + 1e-9), 0, h - 1))
    r1 = int(np.clip(np.ceil(y1 * h - 1e-9), r0 + 1, h))
    return r0, c0, r1, c1


def crop_box(mask: np.ndarray, box, out_size=64) -> np.ndarray:
    """Cut the box region out of a full-image mask and resample to a square crop."""
    r0, c0, r1, c1 = box_to_pixels(box, mask.shape[-2:])
    return resize_nearest(mask[..., r0:r1, c0:c1], (out_size, out_size))


def paste_box(patch: np.ndarray, box, image_hw) -> np.ndarray:
    """Resample a square crop back to the box region inside a zeroed full image."""
    r0, c0, r1, c1 = box_to_pixels(box, image_hw)
    out = np.zeros(image_hw, dtype=patch.dtype)
    out[r0:r1, c0:c1] = resize_nearest(patch, (r1 - r0, c1 - c0))
    return out
