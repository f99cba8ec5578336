"""Symmetric INT8 quantization with per-(head, channel) scales.

Scale is max(|x|)/127 over the tokens of a segment, so the lane maximum
maps to exactly +-127 and no code ever needs -128. Rounding is half away
from zero, which keeps the elementwise roundtrip error within scale/2.
Dequantization happens on read inside the attention block loop.
"""

from __future__ import annotations

import numpy as np

from .cache import HIGH, LayerCache, QuantSegment


def quantize_segment(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quantize a [n_tokens, heads, head_dim] block to INT8 codes.

    Returns (codes, scale) where scale is [heads, head_dim]. Lanes that
    are all zero get scale 0 and all-zero codes; no division happens for
    them.
    """
    x = np.asarray(values, dtype=np.float32)
    if x.ndim != 3 or x.shape[0] < 1:
        raise ValueError(f"expected [n_tokens, heads, head_dim] with n >= 1, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("values must be finite")
    scale = np.abs(x).max(axis=0) / 127.0
    safe = np.where(scale > 0, scale, 1.0)
    scaled = x / safe
    codes = np.copysign(np.floor(np.abs(scaled) + 0.5), scaled)
    codes = np.clip(codes, -127, 127).astype(np.int8)
    codes[:, scale == 0] = 0
    return codes, scale.astype(np.float32)


def dequantize(codes: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """codes * scale per lane; exact at lane extremes and at zero."""
    return codes.astype(np.float32) * np.asarray(scale, dtype=np.float32)


def apply_fp16_window(cache: LayerCache, window: int, current_step: int) -> int:
    """Quantize retained entries older than the high-precision window.

    Every high-precision entry whose generation_step <= current_step - window
    becomes INT8; all of them join one new segment (K and V quantized with
    separate scales). Entries already INT8 are never requantized. Returns
    the number of newly quantized entries.
    """
    n = cache.valid_len
    if n == 0:
        return 0
    tags = cache.segment_of[:n]
    old = (tags == HIGH) & (cache.steps[:n] <= current_step - window)
    count = int(old.sum())
    if count == 0:
        return 0
    rows = np.nonzero(old)[0]
    k_codes, k_scale = quantize_segment(cache.keys[rows])
    v_codes, v_scale = quantize_segment(cache.values[rows])
    seg_id = len(cache.segments)
    cache.segments.append(
        QuantSegment(k_scale=k_scale, v_scale=v_scale, member_count=count)
    )
    cache.k_codes[rows] = k_codes
    cache.v_codes[rows] = v_codes
    cache.segment_of[rows] = seg_id
    return count
