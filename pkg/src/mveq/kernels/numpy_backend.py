"""Pure-numpy implementations of the hot kernels.

Same contracts as mveq.kernels.fastcore; selected automatically when the
compiled extension is unavailable (or forced via MVEQ_KERNELS=python).
Scores and accumulations are float64 in both backends.
"""

from __future__ import annotations

import numpy as np

NAME = "python"

# Chunk queries so the score matrix stays within ~64 MB.
_CHUNK_BYTES = 64 << 20


def nn_argmax(cand: np.ndarray, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per query, the index and score of the best candidate by dot product.

    cand: (M, C) float64, queries: (N, C) float64. Ties resolve to the lowest
    candidate index (np.argmax keeps the first maximum).
    """
    m = cand.shape[0]
    n = queries.shape[0]
    idx = np.empty(n, dtype=np.int64)
    score = np.empty(n, dtype=np.float64)
    rows = max(1, _CHUNK_BYTES // max(1, 8 * m))
    for lo in range(0, n, rows):
        hi = min(n, lo + rows)
        scores = queries[lo:hi] @ cand.T
        best = np.argmax(scores, axis=1)
        idx[lo:hi] = best
        score[lo:hi] = scores[np.arange(hi - lo), best]
    return idx, score


def _bilinear_parts(xs, ys, h, w):
    gx = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1.0)
    gy = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1.0)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    x0 = np.minimum(x0, w - 2) if w > 1 else x0 * 0
    y0 = np.minimum(y0, h - 2) if h > 1 else y0 * 0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = gx - x0
    fy = gy - y0
    return x0, y0, x1, y1, fx, fy


def bilinear_gather(data: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of data (H, W, C) at grid coords, clamped.

    Returns (N, C) float64. Weight/term order matches the compiled kernel:
    v00*w00 + v01*w01 + v10*w10 + v11*w11 (row-major corners).
    """
    h, w = data.shape[0], data.shape[1]
    x0, y0, x1, y1, fx, fy = _bilinear_parts(xs, ys, h, w)
    w00 = ((1.0 - fy) * (1.0 - fx))[:, None]
    w01 = ((1.0 - fy) * fx)[:, None]
    w10 = (fy * (1.0 - fx))[:, None]
    w11 = (fy * fx)[:, None]
    d = data.astype(np.float64, copy=False)
    return d[y0, x0] * w00 + d[y0, x1] * w01 + d[y1, x0] * w10 + d[y1, x1] * w11


def bilinear_scatter(h: int, w: int, xs: np.ndarray, ys: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Adjoint of bilinear_gather: accumulate (N, C) vals into an (H, W, C) grid."""
    x0, y0, x1, y1, fx, fy = _bilinear_parts(xs, ys, h, w)
    c = vals.shape[1]
    out = np.zeros((h, w, c), dtype=np.float64)
    flat = out.reshape(-1, c)
    w00 = ((1.0 - fy) * (1.0 - fx))[:, None]
    w01 = ((1.0 - fy) * fx)[:, None]
    w10 = (fy * (1.0 - fx))[:, None]
    w11 = (fy * fx)[:, None]
    np.add.at(flat, y0 * w + x0, vals * w00)
    np.add.at(flat, y0 * w + x1, vals * w01)
    np.add.at(flat, y1 * w + x0, vals * w10)
    np.add.at(flat, y1 * w + x1, vals * w11)
    return out


def conv3x3_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 convolution, stride 1, zero padding 1, same spatial dims.

    x: (H, W, Ci) float64, weights: (Co, Ci, 3, 3), bias: (Co,). Returns
    (H, W, Co) float64.
    """
    h, w, _ = x.shape
    co = weights.shape[0]
    padded = np.zeros((h + 2, w + 2, x.shape[2]), dtype=np.float64)
    padded[1:-1, 1:-1] = x
    out = np.broadcast_to(bias, (h, w, co)).astype(np.float64).copy()
    for ki in range(3):
        for kj in range(3):
            out += padded[ki : ki + h, kj : kj + w] @ weights[:, :, ki, kj].T
    return out


def conv3x3_backward(
    x: np.ndarray, weights: np.ndarray, d_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv3x3_forward: returns (d_x, d_weights, d_bias)."""
    h, w, ci = x.shape
    co = weights.shape[0]
    padded = np.zeros((h + 2, w + 2, ci), dtype=np.float64)
    padded[1:-1, 1:-1] = x
    dpad = np.zeros_like(padded)
    dw = np.zeros_like(weights, dtype=np.float64)
    g = d_out.reshape(h * w, co)
    for ki in range(3):
        for kj in range(3):
            dpad[ki : ki + h, kj : kj + w] += d_out @ weights[:, :, ki, kj]
            patch = padded[ki : ki + h, kj : kj + w].reshape(h * w, ci)
            dw[:, :, ki, kj] = g.T @ patch
    db = d_out.sum(axis=(0, 1))
    return dpad[1:-1, 1:-1], dw, db
