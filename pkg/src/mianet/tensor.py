"""Dense tensor primitives used by the prior, prototype and fusion code.

Tensors are plain ``numpy.ndarray`` values laid out channel-first
(``[c, h, w]``).  Binary masks are 2-D integer arrays holding only 0 and 1.
Every function here is pure: inputs are never mutated.
"""

from __future__ import annotations

import math

import numpy as np

MINMAX_EPS = 1e-7
COSINE_EPS = 1e-8


def _check_size(out_h: int, out_w: int) -> None:
    if out_h < 1 or out_w < 1:
        raise ValueError("invalid target size")


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Return the ``[n_out, n_in]`` 1-D linear interpolation operator.

    Pixel centres sit at ``(i + 0.5) / n`` (align_corners=False); source
    coordinates below zero are clamped, as in the common deep-learning
    convention.
    """
    mat = np.zeros((n_out, n_in))
    if n_in == n_out:
        np.fill_diagonal(mat, 1.0)
        return mat
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        mat[i, i0] += 1.0 - frac
        mat[i, i1] += frac
    return mat


def resize_bilinear(t: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly resize ``t`` (``[c, h, w]`` or ``[h, w]``) to ``(out_h, out_w)``."""
    _check_size(out_h, out_w)
    t = np.asarray(t, dtype=np.float64)
    h, w = t.shape[-2:]
    if (h, w) == (out_h, out_w):
        return t.copy()
    rh = bilinear_matrix(h, out_h)
    rw = bilinear_matrix(w, out_w)
    return rh @ t @ rw.T


def resize_mask(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a binary mask: bilinear, then threshold at 0.5 (ties go to 1)."""
    _check_size(out_h, out_w)
    soft = resize_bilinear(np.asarray(m, dtype=np.float64), out_h, out_w)
    return (soft >= 0.5).astype(np.uint8)


def pool_windows(n_in: int, n_out: int) -> list[tuple[int, int]]:
    """Adaptive pooling windows ``[floor(i*n/k), ceil((i+1)*n/k))``."""
    return [((i * n_in) // n_out, -((-(i + 1) * n_in) // n_out)) for i in range(n_out)]


def average_pool_to(t: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Adaptive average pooling of ``[c, h, w]`` down to ``[c, out_h, out_w]``."""
    _check_size(out_h, out_w)
    t = np.asarray(t, dtype=np.float64)
    c, h, w = t.shape
    if out_h > h or out_w > w:
        raise ValueError("pooling cannot upsample")
    out = np.empty((c, out_h, out_w))
    rows = pool_windows(h, out_h)
    cols = pool_windows(w, out_w)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, i, j] = t[:, r0:r1, c0:c1].mean(axis=(1, 2))
    return out


def masked_average_pool(f: np.ndarray, m: np.ndarray) -> tuple[np.ndarray, bool]:
    """Per-channel mean of ``f`` over the foreground of ``m``.

    The mask is resized to the feature grid first.  Returns ``(vector, empty)``
    where ``empty`` is True when no foreground pixel survived the resize; the
    vector is then all zeros.
    """
    f = np.asarray(f, dtype=np.float64)
    c, h, w = f.shape
    mask = resize_mask(m, h, w).astype(np.float64)
    area = mask.sum()
    if area == 0:
        return np.zeros(c), True
    return (f * mask).sum(axis=(1, 2)) / area, False


def minmax_normalize(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    lo = t.min()
    hi = t.max()
    return (t - lo) / (hi - lo + MINMAX_EPS)


def cosine_similarity_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity between the columns of ``a [c, n]`` and ``b [c, m]``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"channel mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] == 0:
        raise ValueError("cosine similarity needs at least one channel")
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    return (a.T @ b) / (np.outer(na, nb) + COSINE_EPS)


def l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product; a ``[h, w]`` map broadcasts over ``[c, h, w]``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape and a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape != b.shape and min(a.ndim, b.ndim) != 2:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"spatial mismatch: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=0)


def expand_vector(v: np.ndarray, h: int, w: int) -> np.ndarray:
    """Tile a ``[c]`` vector into ``[c, h, w]`` constant planes."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a vector, got shape {v.shape}")
    return np.broadcast_to(v[:, None, None], (v.shape[0], h, w)).copy()
