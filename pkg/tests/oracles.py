"""Independent reference implementations used as test oracles.

Everything here is written with explicit loops or a different library so it
shares no code path with the package under test.
"""
from __future__ import annotations

import numpy as np


def conv2d_loops(x, w, stride, padding):
    """Direct 7-loop convolution (cross-correlation), zero padding."""
    B, C, H, W = x.shape
    N, C2, K, K2 = w.shape
    assert C == C2 and K == K2
    Ho = (H + 2 * padding - K) // stride + 1
    Wo = (W + 2 * padding - K) // stride + 1
    out = np.zeros((B, N, Ho, Wo), dtype=np.float64)
    for b in range(B):
        for n in range(N):
            for oy in range(Ho):
                for ox in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for ky in range(K):
                            for kx in range(K):
                                iy = oy * stride + ky - padding
                                ix = ox * stride + kx - padding
                                if 0 <= iy < H and 0 <= ix < W:
                                    acc += x[b, c, iy, ix] * w[n, c, ky, kx]
                    out[b, n, oy, ox] = acc
    return out


def maxpool_loops(x, size, stride, padding):
    B, C, H, W = x.shape
    Ho = (H + 2 * padding - size) // stride + 1
    Wo = (W + 2 * padding - size) // stride + 1
    out = np.full((B, C, Ho, Wo), -np.inf)
    for b in range(B):
        for c in range(C):
            for oy in range(Ho):
                for ox in range(Wo):
                    for ky in range(size):
                        for kx in range(size):
                            iy, ix = oy * stride + ky - padding, ox * stride + kx - padding
                            if 0 <= iy < H and 0 <= ix < W:
                                out[b, c, oy, ox] = max(out[b, c, oy, ox], x[b, c, iy, ix])
    return out


def batchnorm_reference(x, gamma, beta, eps):
    """Training-mode batch norm per channel, written channel by channel."""
    out = np.empty_like(x, dtype=np.float64)
    for c in range(x.shape[1]):
        v = x[:, c].astype(np.float64)
        out[:, c] = gamma[c] * (v - v.mean()) / np.sqrt(v.var() + eps) + beta[c]
    return out


def ring_cells(K, i):
    """Cells at Chebyshev depth i-1 from the border, by direct enumeration."""
    return {(r, c) for r in range(K) for c in range(K) if min(r, c, K - 1 - r, K - 1 - c) == i - 1}


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))
