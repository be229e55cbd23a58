"""Adaptive aggregation of two warped depth maps.

Per pixel, cosine similarity between each warped RGB image and the actual
future image is pushed through a pairwise softmax, and the resulting weights
fuse the two warped depth candidates. Pixels where a warped image is masked
get similarity MASKED_SIMILARITY so the visible branch dominates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flowwarp import WarpResult

# frozen constant: similarity assigned to masked-out warped pixels
MASKED_SIMILARITY = -1.0


@dataclass(frozen=True)
class WeightMap:
    w_tm1: np.ndarray
    w_t: np.ndarray


def _pixel_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity of per-pixel channel vectors; zero-norm pixels get 0."""
    dot = (a * b).sum(axis=-1)
    na = np.sqrt((a * a).sum(axis=-1))
    nb = np.sqrt((b * b).sum(axis=-1))
    denom = na * nb
    out = np.zeros_like(dot)
    ok = denom > 0
    out[ok] = dot[ok] / denom[ok]
    return out


def cosine_weights(i_w_tm1: WarpResult, i_w_t: WarpResult, i_target: np.ndarray) -> WeightMap:
    """Per-pixel softmax over the {t-1, t} cosine similarities."""
    shapes = {i_w_tm1.values.shape, i_w_t.values.shape, i_target.shape}
    if len(shapes) != 1:
        raise ValueError(f"resolution mismatch: {sorted(s[:2] for s in shapes)}")
    s_tm1 = _pixel_cosine(i_w_tm1.values, i_target)
    s_t = _pixel_cosine(i_w_t.values, i_target)
    m_tm1 = i_w_tm1.mask if i_w_tm1.mask.ndim == 2 else i_w_tm1.mask[..., 0]
    m_t = i_w_t.mask if i_w_t.mask.ndim == 2 else i_w_t.mask[..., 0]
    s_tm1 = np.where(m_tm1, s_tm1, MASKED_SIMILARITY)
    s_t = np.where(m_t, s_t, MASKED_SIMILARITY)
    # pairwise softmax, stabilized
    mx = np.maximum(s_tm1, s_t)
    e_tm1 = np.exp(s_tm1 - mx)
    e_t = np.exp(s_t - mx)
    z = e_tm1 + e_t
    return WeightMap(e_tm1 / z, e_t / z)


def aggregate_depth(w: WeightMap, d_w_tm1: WarpResult, d_w_t: WarpResult) -> np.ndarray:
    """Weighted fusion of the two warped sparse depth maps.

    Both valid: convex combination. Exactly one valid: weights renormalize
    over the valid branch, i.e. that depth passes through. None valid: 0.
    """
    if d_w_tm1.values.shape != d_w_t.values.shape:
        raise ValueError(f"resolution mismatch: {d_w_tm1.values.shape} vs {d_w_t.values.shape}")
    for arr in (w.w_tm1, w.w_t):
        if np.any(arr < 0) or np.any(arr > 1):
            raise ValueError("aggregation weights outside [0, 1]")
    m1 = d_w_tm1.mask
    m2 = d_w_t.mask
    both = m1 & m2
    out = np.zeros_like(d_w_tm1.values)
    out[both] = w.w_tm1[both] * d_w_tm1.values[both] + w.w_t[both] * d_w_t.values[both]
    only1 = m1 & ~m2
    only2 = m2 & ~m1
    out[only1] = d_w_tm1.values[only1]
    out[only2] = d_w_t.values[only2]
    return out
