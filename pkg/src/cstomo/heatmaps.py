"""Rearrangement of two projection vectors into the centrosymmetry and smoothness heatmaps.

Both heatmaps are pure permutations of the 2M input values, so the layer
is implemented as integer gather maps; the backward pass is the matching
scatter.  Layout is channels-last: S has shape (2Q, R, 1) and P has shape
(R/F, Q*F, 2).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


def least_prime_factor(R: int) -> int:
    R = int(R)
    if R < 2:
        raise ValueError(f"R must be at least 2, got {R}")
    f = 2
    while f * f <= R:
        if R % f == 0:
            return f
        f += 1
    return R


@dataclass(frozen=True)
class HeatmapPair:
    S: np.ndarray
    P: np.ndarray


@lru_cache(maxsize=None)
def heatmap_index(Q: int, R: int) -> tuple[np.ndarray, np.ndarray]:
    """Gather indices into the stacked input ``concat(A1, A2)`` (length 2M).

    Returns ``(s_idx, p_idx)`` shaped like S and P.  ``S[...] = x[s_idx]``.
    """
    M = Q * R
    F = least_prime_factor(R)
    flat = np.arange(2 * M)
    a1 = flat[:M].reshape(Q, R)
    a2 = flat[M:].reshape(Q, R)
    # second frequency is the flipped one; flip = reverse row order
    s_idx = np.concatenate([a1, a2[::-1]], axis=0)[:, :, None]

    p_idx = np.empty((R // F, Q * F, 2), dtype=np.int64)
    for ch in range(2):
        vec = flat[ch * M:(ch + 1) * M]
        for j in range(Q):
            p_idx[:, F * j:F * (j + 1), ch] = vec[R * j:R * (j + 1)].reshape(R // F, F)
    s_idx.setflags(write=False)
    p_idx.setflags(write=False)
    return s_idx, p_idx


def build_heatmaps(A1, A2, Q: int, R: int) -> HeatmapPair:
    """Heatmaps for one example or a batch (leading axes are preserved)."""
    A1, A2 = np.asarray(A1), np.asarray(A2)
    if A1.shape != A2.shape or A1.shape[-1] != Q * R:
        raise ValueError(f"expected two vectors of length Q*R={Q * R}, got {A1.shape} and {A2.shape}")
    x = np.concatenate([A1, A2], axis=-1)
    s_idx, p_idx = heatmap_index(Q, R)
    return HeatmapPair(x[..., s_idx], x[..., p_idx])


def invert_heatmaps(S, P, Q: int, R: int, which: str = "S") -> tuple[np.ndarray, np.ndarray]:
    """Recover (A1, A2) from either heatmap."""
    s_idx, p_idx = heatmap_index(Q, R)
    idx, hm = (s_idx, S) if which == "S" else (p_idx, P)
    hm = np.asarray(hm)
    lead = hm.shape[:hm.ndim - idx.ndim]
    x = np.empty(lead + (2 * Q * R,), dtype=hm.dtype)
    x[..., idx.ravel()] = hm.reshape(lead + (-1,))
    return x[..., :Q * R], x[..., Q * R:]


def heatmaps_backward(dS, dP, Q: int, R: int) -> tuple[np.ndarray, np.ndarray]:
    """Gradient w.r.t. (A1, A2) given gradients w.r.t. S and P (batched)."""
    s_idx, p_idx = heatmap_index(Q, R)
    dS, dP = np.asarray(dS), np.asarray(dP)
    lead = dS.shape[:dS.ndim - 3]
    g = np.zeros(lead + (2 * Q * R,))
    # every input lands exactly once in each heatmap, so plain assignment-add is safe
    g[..., s_idx.ravel()] += dS.reshape(lead + (-1,))
    g[..., p_idx.ravel()] += dP.reshape(lead + (-1,))
    return g[..., :Q * R], g[..., Q * R:]
