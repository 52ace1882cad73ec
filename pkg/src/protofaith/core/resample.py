"""Separable resampling (bicubic, bilinear, nearest) and the 5x5 Gaussian blur.

All resamplers use the half-pixel-centre convention: output pixel ``i`` of an
``n -> m`` resize samples source coordinate ``(i + 0.5) * n / m - 0.5``.
Out-of-range taps replicate the edge.
"""
from __future__ import annotations

import numpy as np

from protofaith.core.engine import DTYPE
from protofaith.errors import ArgumentError

CUBIC_A = -0.5
BLUR_SIGMA = 1.0
BLUR_SIZE = 5


def cubic_kernel(t, a: float = CUBIC_A):
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def source_coords(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5


def cubic_matrix(n_in: int, n_out: int, a: float = CUBIC_A) -> np.ndarray:
    """(n_out, n_in) matrix applying 1-d bicubic interpolation."""
    src = source_coords(n_in, n_out)
    base = np.floor(src).astype(np.int64)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    for k in range(-1, 3):
        tap = base + k
        weight = cubic_kernel(src - tap, a)
        np.add.at(mat, (rows, np.clip(tap, 0, n_in - 1)), weight)
    return mat


def linear_matrix(n_in: int, n_out: int) -> np.ndarray:
    src = source_coords(n_in, n_out)
    base = np.floor(src).astype(np.int64)
    frac = src - base
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, np.clip(base, 0, n_in - 1)), 1.0 - frac)
    np.add.at(mat, (rows, np.clip(base + 1, 0, n_in - 1)), frac)
    return mat


def _check_map(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values)
    if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
        raise ArgumentError(f"expected a non-empty 2-d map, got shape {values.shape}")
    return values.astype(np.float64)


def bicubic_upsample(values: np.ndarray, out_h: int, out_w: int, a: float = CUBIC_A) -> np.ndarray:
    m = _check_map(values)
    out = cubic_matrix(m.shape[0], out_h, a) @ m @ cubic_matrix(m.shape[1], out_w, a).T
    return out.astype(DTYPE)


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a (C, H, W) tensor with bilinear interpolation."""
    image = np.asarray(image, dtype=np.float64)
    rows = linear_matrix(image.shape[1], out_h)
    cols = linear_matrix(image.shape[2], out_w)
    return np.einsum("ih,chw,jw->cij", rows, image, cols).astype(DTYPE)


def nearest_resize(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape
    rows = np.minimum((np.arange(out_h) + 0.5) * h / out_h, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(out_w) + 0.5) * w / out_w, w - 1).astype(np.int64)
    return mask[rows[:, None], cols[None, :]]


def gaussian_kernel5(sigma: float = BLUR_SIGMA) -> np.ndarray:
    t = np.arange(BLUR_SIZE, dtype=np.float64) - BLUR_SIZE // 2
    g = np.exp(-(t * t) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    # mirror without repeating the edge sample; period 2(n-1)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def gaussian_blur5(values: np.ndarray, sigma: float = BLUR_SIGMA) -> np.ndarray:
    m = _check_map(values)
    kernel = gaussian_kernel5(sigma)
    h, w = m.shape
    r = BLUR_SIZE // 2
    ri = _reflect_index(np.arange(-r, h + r), h)
    ci = _reflect_index(np.arange(-r, w + r), w)
    padded = m[ri[:, None], ci[None, :]]
    out = np.zeros_like(m)
    for i in range(BLUR_SIZE):
        for j in range(BLUR_SIZE):
            out += kernel[i, j] * padded[i : i + h, j : j + w]
    return out.astype(DTYPE)
