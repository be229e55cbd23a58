"""Backward warping of depth maps and RGB images with optical flow.

The flow is target-anchored: the output value at pixel p is sampled from the
source at p + F(p). Sparse depth uses nearest-neighbor sampling with validity
propagation (bilinear would blend real depths with invalid zeros); dense RGB
uses bilinear sampling. Out-of-bounds samples are masked and zero-filled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import validity


@dataclass(frozen=True)
class WarpResult:
    values: np.ndarray  # warped grid, 0 where masked
    mask: np.ndarray  # bool, True where the sample was usable


def _check_resolution(src, flow):
    if src.shape[:2] != flow.shape[:2]:
        raise ValueError(f"source {src.shape[:2]} and flow {flow.shape[:2]} resolution mismatch")


def _round_half_away(x):
    # np.round ties to even; the frozen convention is half away from zero
    return np.floor(np.abs(x) + 0.5) * np.sign(x)


def warp_depth(src: np.ndarray, flow: np.ndarray) -> WarpResult:
    """Nearest-neighbor backward warp of a sparse depth map."""
    _check_resolution(src, flow)
    h, w = src.shape
    v, u = np.mgrid[0:h, 0:w]
    su = _round_half_away(u + flow[..., 0].astype(np.float64))
    sv = _round_half_away(v + flow[..., 1].astype(np.float64))
    inb = (su >= 0) & (su < w) & (sv >= 0) & (sv < h)
    sui = np.where(inb, su, 0).astype(np.intp)
    svi = np.where(inb, sv, 0).astype(np.intp)
    sampled = src[svi, sui]
    mask = inb & (sampled > 0)
    return WarpResult(np.where(mask, sampled, 0.0), mask)


def warp_rgb(src: np.ndarray, flow: np.ndarray) -> WarpResult:
    """Bilinear backward warp of a dense image ((H,W,3) or (H,W))."""
    _check_resolution(src, flow)
    h, w = src.shape[:2]
    v, u = np.mgrid[0:h, 0:w]
    su = u + flow[..., 0].astype(np.float64)
    sv = v + flow[..., 1].astype(np.float64)
    inb = (su >= 0) & (su <= w - 1) & (sv >= 0) & (sv <= h - 1)
    su = np.clip(su, 0, w - 1)
    sv = np.clip(sv, 0, h - 1)
    u0 = np.clip(np.floor(su).astype(np.intp), 0, w - 2) if w > 1 else np.zeros_like(su, dtype=np.intp)
    v0 = np.clip(np.floor(sv).astype(np.intp), 0, h - 2) if h > 1 else np.zeros_like(sv, dtype=np.intp)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = su - u0
    fv = sv - v0
    if src.ndim == 3:
        fu = fu[..., None]
        fv = fv[..., None]
    out = (
        src[v0, u0] * (1 - fu) * (1 - fv)
        + src[v0, u1] * fu * (1 - fv)
        + src[v1, u0] * (1 - fu) * fv
        + src[v1, u1] * fu * fv
    )
    m = inb if src.ndim == 2 else inb[..., None]
    return WarpResult(np.where(m, out, 0.0), inb)
