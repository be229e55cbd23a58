"""Edge feature extraction from the future RGB frame (classic Canny chain).

Pipeline: luma grayscale -> Gaussian blur -> Sobel gradients -> non-maximum
suppression along the quantized gradient direction -> double-threshold
hysteresis. Output is a binary 0/1 map on the source grid.
"""

from __future__ import annotations

import numpy as np

DEFAULT_SIGMA = 1.4
DEFAULT_LOW = 0.1
DEFAULT_HIGH = 0.2

_LUMA = np.array([0.299, 0.587, 0.114])

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T


def _gaussian_kernel1d(sigma):
    radius = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _convolve2d_reflect(img, kernel):
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    pad = np.pad(img, ((ph, ph), (pw, pw)), mode="reflect")
    out = np.zeros_like(img)
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * pad[i : i + img.shape[0], j : j + img.shape[1]]
    return out


def _gaussian_blur(img, sigma):
    k = _gaussian_kernel1d(sigma)
    img = _convolve2d_reflect(img, k[None, :])
    return _convolve2d_reflect(img, k[:, None])


def canny(img: np.ndarray, sigma: float = DEFAULT_SIGMA, low: float = DEFAULT_LOW, high: float = DEFAULT_HIGH) -> np.ndarray:
    """Binary edge map of an (H,W,3) image in [0,1] (or an (H,W) grayscale)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not 0 < low < high:
        raise ValueError(f"need 0 < low < high, got low={low}, high={high}")
    gray = img @ _LUMA if img.ndim == 3 else img.astype(np.float64)
    blurred = _gaussian_blur(gray, sigma)
    gx = _convolve2d_reflect(blurred, _SOBEL_X)
    gy = _convolve2d_reflect(blurred, _SOBEL_Y)
    mag = np.hypot(gx, gy)

    # non-maximum suppression: compare against the two neighbors along the
    # gradient direction, quantized to 4 directions
    angle = np.mod(np.arctan2(gy, gx), np.pi)
    padm = np.pad(mag, 1, mode="constant")
    h, w = mag.shape
    c = padm[1 : 1 + h, 1 : 1 + w]
    neighbors = {
        0: (padm[1 : 1 + h, 2 : 2 + w], padm[1 : 1 + h, 0:w]),  # E/W
        1: (padm[0:h, 2 : 2 + w], padm[2 : 2 + h, 0:w]),  # NE/SW
        2: (padm[0:h, 1 : 1 + w], padm[2 : 2 + h, 1 : 1 + w]),  # N/S
        3: (padm[0:h, 0:w], padm[2 : 2 + h, 2 : 2 + w]),  # NW/SE
    }
    q = np.floor((angle + np.pi / 8) / (np.pi / 4)).astype(int) % 4
    keep = np.zeros_like(mag, dtype=bool)
    for d, (a, b) in neighbors.items():
        sel = q == d
        keep |= sel & (c >= a) & (c >= b)
    nms = np.where(keep, mag, 0.0)

    strong = nms >= high
    weak = nms >= low

    # hysteresis: flood from strong seeds through weak pixels (8-connected)
    edges = strong.copy()
    stack = list(zip(*np.nonzero(strong)))
    while stack:
        i, j = stack.pop()
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                ni, nj = i + di, j + dj
                if 0 <= ni < h and 0 <= nj < w and weak[ni, nj] and not edges[ni, nj]:
                    edges[ni, nj] = True
                    stack.append((ni, nj))
    return edges.astype(np.float64)
