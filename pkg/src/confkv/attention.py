"""Blockwise attention with exact online softmax, plus a dense oracle.

The tiled path reads the compacted cache block by block, maintaining the
running max and normalizer that make blockwise softmax exact, and
dequantizes INT8 blocks on read. Blocks are processed in ascending
storage order so summation order is deterministic; heads never share
accumulators. Accumulation is float64 while storage stays float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cache import LayerCache


@dataclass
class OnlineSoftmaxState:
    """Running (max, normalizer, accumulator) per head.

    After any prefix of blocks these equal what a single dense pass over
    that prefix would produce.
    """

    running_max: np.ndarray  # [heads]
    normalizer: np.ndarray   # [heads]
    accumulator: np.ndarray  # [heads, head_dim]
    weights: np.ndarray = field(repr=False)  # [heads, n] unnormalized exp


def naive_attention(
    query: np.ndarray, keys: np.ndarray, values: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Dense single-pass attention oracle.

    Args:
        query: [heads, head_dim].
        keys, values: [n, heads, head_dim] with n >= 1.

    Returns:
        (output [heads, head_dim], weights [heads, n]); weights rows sum
        to 1 and feed the metadata path.
    """
    q = np.asarray(query, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if k.shape[0] < 1:
        raise ValueError("attention requires at least one cached entry")
    d = q.shape[-1]
    logits = np.einsum("hd,nhd->hn", q, k) / np.sqrt(d)
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1)
    out = np.einsum("hn,nhd->hd", e, v) / z[:, None]
    return out, e / z[:, None]


def tiled_attention(
    query: np.ndarray, cache: LayerCache, block_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Exact attention over the cache prefix in blocks of block_size.

    Matches naive_attention over the dequantized cache within float
    rounding; with a single block the two paths perform identical
    operations. Returns (output [heads, head_dim], weights [heads, n]).
    """
    n = cache.valid_len
    if n == 0:
        raise ValueError("attention over an empty cache")
    if block_size < 1:
        raise ValueError(f"block_size must be >= 1, got {block_size}")

    q = np.asarray(query, dtype=np.float64)
    heads, d = q.shape
    state = OnlineSoftmaxState(
        running_max=np.full(heads, -np.inf),
        normalizer=np.zeros(heads),
        accumulator=np.zeros((heads, d)),
        weights=np.zeros((heads, n)),
    )
    inv_sqrt_d = 1.0 / np.sqrt(d)

    for lo in range(0, n, block_size):
        hi = min(lo + block_size, n)
        k_blk, v_blk = cache.read_block(lo, hi)
        logits = np.einsum("hd,nhd->hn", q, k_blk.astype(np.float64)) * inv_sqrt_d
        new_max = np.maximum(state.running_max, logits.max(axis=1))
        corr = np.exp(state.running_max - new_max)
        e = np.exp(logits - new_max[:, None])
        state.normalizer = state.normalizer * corr + e.sum(axis=1)
        state.accumulator = state.accumulator * corr[:, None] + np.einsum(
            "hn,nhd->hd", e, v_blk.astype(np.float64)
        )
        state.weights[:, :lo] *= corr[:, None]
        state.weights[:, lo:hi] = e
        state.running_max = new_max

    out = state.accumulator / state.normalizer[:, None]
    weights = state.weights / state.normalizer[:, None]
    return out, weights
