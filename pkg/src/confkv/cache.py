"""Per-layer KV storage with O(1) append, contiguous compaction, and
analytic memory accounting.

Entries live in preallocated [capacity, heads, head_dim] arrays; parallel
metadata arrays carry original position, generation step, and an EMA of
head-averaged attention mass. Entries are either high precision (2-byte
accounting per element) or INT8 members of a quantization segment that
holds one per-(head, channel) scale pair for K and V. Arithmetic is
float32/float64 throughout; precision tags drive accounting and the
dequantize-on-read path, not the math.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

HIGH = -1  # precision tag for unquantized entries
_HIGH_BYTES = 2
_INT8_BYTES = 1
_SCALE_BYTES = 4


@dataclass
class TokenMeta:
    """Metadata view of a single cached entry."""

    original_position: int
    generation_step: int
    ema_attention: float
    seen_once: bool


@dataclass
class QuantSegment:
    """Scales shared by all entries quantized in one event.

    scale[h, c] = max(|x|) / 127 over the member tokens of that lane;
    zero only when every member element is zero.
    """

    k_scale: np.ndarray  # [heads, head_dim] float32
    v_scale: np.ndarray
    member_count: int


class LayerCache:
    """Single-owner KV cache for one layer.

    The storage prefix 0..valid_len-1 is contiguous and sorted by
    original_position ascending; compaction preserves that order.
    """

    def __init__(self, num_heads: int, head_dim: int, capacity: int = 64):
        if num_heads <= 0 or head_dim <= 0 or capacity <= 0:
            raise ValueError("num_heads, head_dim, capacity must be positive")
        self.num_heads = num_heads
        self.head_dim = head_dim
        self.capacity = capacity
        self.valid_len = 0

        shape = (capacity, num_heads, head_dim)
        self.keys = np.zeros(shape, dtype=np.float32)
        self.values = np.zeros(shape, dtype=np.float32)
        self.k_codes = np.zeros(shape, dtype=np.int8)
        self.v_codes = np.zeros(shape, dtype=np.int8)

        self.positions = np.zeros(capacity, dtype=np.int64)
        self.steps = np.zeros(capacity, dtype=np.int64)
        self.ema = np.zeros(capacity, dtype=np.float64)
        self.seen = np.zeros(capacity, dtype=bool)
        self.segment_of = np.full(capacity, HIGH, dtype=np.int32)

        self.segments: list[QuantSegment] = []
        # extra per-entry channels (e.g. cumulative attention for the
        # heavy-hitter baseline); compacted along with the entries
        self.aux: dict[str, np.ndarray] = {}

    # -- storage management ------------------------------------------------

    def _grow(self, minimum: int) -> None:
        new_cap = self.capacity
        while new_cap < minimum:
            new_cap *= 2
        pad = new_cap - self.capacity
        self.keys = np.concatenate(
            [self.keys, np.zeros((pad, self.num_heads, self.head_dim), np.float32)]
        )
        self.values = np.concatenate(
            [self.values, np.zeros((pad, self.num_heads, self.head_dim), np.float32)]
        )
        self.k_codes = np.concatenate(
            [self.k_codes, np.zeros((pad, self.num_heads, self.head_dim), np.int8)]
        )
        self.v_codes = np.concatenate(
            [self.v_codes, np.zeros((pad, self.num_heads, self.head_dim), np.int8)]
        )
        self.positions = np.concatenate([self.positions, np.zeros(pad, np.int64)])
        self.steps = np.concatenate([self.steps, np.zeros(pad, np.int64)])
        self.ema = np.concatenate([self.ema, np.zeros(pad, np.float64)])
        self.seen = np.concatenate([self.seen, np.zeros(pad, bool)])
        self.segment_of = np.concatenate(
            [self.segment_of, np.full(pad, HIGH, np.int32)]
        )
        for name, arr in self.aux.items():
            self.aux[name] = np.concatenate([arr, np.zeros(pad, arr.dtype)])
        self.capacity = new_cap

    def append(
        self, k: np.ndarray, v: np.ndarray, original_position: int, generation_step: int
    ) -> None:
        """Store one entry at high precision; O(1) amortized."""
        k = np.asarray(k, dtype=np.float32)
        v = np.asarray(v, dtype=np.float32)
        want = (self.num_heads, self.head_dim)
        if k.shape != want or v.shape != want:
            raise ValueError(f"expected K/V of shape {want}, got {k.shape} and {v.shape}")
        if self.valid_len == self.capacity:
            self._grow(self.capacity + 1)
        i = self.valid_len
        self.keys[i] = k
        self.values[i] = v
        self.positions[i] = original_position
        self.steps[i] = generation_step
        self.ema[i] = 0.0
        self.seen[i] = False
        self.segment_of[i] = HIGH
        for arr in self.aux.values():
            arr[i] = 0
        self.valid_len = i + 1

    def meta(self, index: int) -> TokenMeta:
        if not 0 <= index < self.valid_len:
            raise IndexError(f"index {index} out of range for valid_len {self.valid_len}")
        return TokenMeta(
            original_position=int(self.positions[index]),
            generation_step=int(self.steps[index]),
            ema_attention=float(self.ema[index]),
            seen_once=bool(self.seen[index]),
        )

    def ensure_aux(self, name: str) -> np.ndarray:
        if name not in self.aux:
            self.aux[name] = np.zeros(self.capacity, dtype=np.float64)
        return self.aux[name]

    # -- metadata updates ----------------------------------------------------

    def update_attention_ema(self, head_attention: np.ndarray, lam: float) -> None:
        """Fold one step of head-averaged attention into the EMA.

        First observation of an entry sets the EMA directly rather than
        decaying from zero, so new tokens are not systematically
        penalized.

        Args:
            head_attention: [heads, valid_len], each row a distribution
                summing to 1 within 1e-4.
            lam: EMA decay in [0, 1].
        """
        a = np.asarray(head_attention, dtype=np.float64)
        if a.shape != (self.num_heads, self.valid_len):
            raise ValueError(
                f"expected attention of shape {(self.num_heads, self.valid_len)}, got {a.shape}"
            )
        sums = a.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-4):
            raise ValueError(f"attention rows must each sum to 1 within 1e-4, got {sums}")
        mean = a.mean(axis=0)
        n = self.valid_len
        seen = self.seen[:n]
        ema = self.ema[:n]
        ema[~seen] = mean[~seen]
        ema[seen] = lam * ema[seen] + (1.0 - lam) * mean[seen]
        self.seen[:n] = True

    # -- compaction ----------------------------------------------------------

    def compact(self, keep_mask: np.ndarray) -> int:
        """Gather survivors into the storage prefix; returns evicted count.

        Metadata, precision tags, segment references, and aux channels
        move with their entries. Segments left with no members are
        dropped and the remaining ones renumbered.
        """
        mask = np.asarray(keep_mask, dtype=bool)
        if mask.shape != (self.valid_len,):
            raise ValueError(
                f"keep_mask length {mask.shape} does not match valid_len {self.valid_len}"
            )
        evicted = int((~mask).sum())
        if evicted == 0:
            return 0
        n = self.valid_len
        idx = np.nonzero(mask)[0]
        k = idx.shape[0]

        # account evicted members before moving anything
        gone_tags = self.segment_of[:n][~mask]
        for tag in gone_tags:
            if tag != HIGH:
                self.segments[tag].member_count -= 1

        self.keys[:k] = self.keys[idx]
        self.values[:k] = self.values[idx]
        self.k_codes[:k] = self.k_codes[idx]
        self.v_codes[:k] = self.v_codes[idx]
        self.positions[:k] = self.positions[idx]
        self.steps[:k] = self.steps[idx]
        self.ema[:k] = self.ema[idx]
        self.seen[:k] = self.seen[idx]
        self.segment_of[:k] = self.segment_of[idx]
        for arr in self.aux.values():
            arr[:k] = arr[idx]
        self.valid_len = k

        self._drop_empty_segments()
        return evicted

    def _drop_empty_segments(self) -> None:
        if not self.segments or all(s.member_count > 0 for s in self.segments):
            return
        remap = np.full(len(self.segments), HIGH, dtype=np.int32)
        kept: list[QuantSegment] = []
        for old_id, seg in enumerate(self.segments):
            if seg.member_count > 0:
                remap[old_id] = len(kept)
                kept.append(seg)
        tags = self.segment_of[: self.valid_len]
        quantized = tags != HIGH
        tags[quantized] = remap[tags[quantized]]
        self.segments = kept

    # -- reads ---------------------------------------------------------------

    def read_block(self, lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
        """Return K/V rows [lo, hi) as float32, dequantizing INT8 members."""
        if not 0 <= lo < hi <= self.valid_len:
            raise ValueError(f"bad block [{lo}, {hi}) for valid_len {self.valid_len}")
        tags = self.segment_of[lo:hi]
        if np.all(tags == HIGH):
            return self.keys[lo:hi], self.values[lo:hi]
        k = self.keys[lo:hi].copy()
        v = self.values[lo:hi].copy()
        for tag in np.unique(tags[tags != HIGH]):
            rows = tags == tag
            seg = self.segments[tag]
            k[rows] = self.k_codes[lo:hi][rows].astype(np.float32) * seg.k_scale
            v[rows] = self.v_codes[lo:hi][rows].astype(np.float32) * seg.v_scale
        return k, v

    def effective_kv(self) -> tuple[np.ndarray, np.ndarray]:
        """All valid K/V as float32 with INT8 entries dequantized."""
        if self.valid_len == 0:
            h, d = self.num_heads, self.head_dim
            return np.zeros((0, h, d), np.float32), np.zeros((0, h, d), np.float32)
        return self.read_block(0, self.valid_len)

    def int8_count(self) -> int:
        return int((self.segment_of[: self.valid_len] != HIGH).sum())

    # -- accounting ----------------------------------------------------------

    def memory_bytes(self) -> int:
        """Analytic footprint: entry elements at 2 or 1 byte for K and V,
        plus one 4-byte scale pair per segment lane."""
        elems = self.num_heads * self.head_dim
        n_int8 = self.int8_count()
        n_high = self.valid_len - n_int8
        entry_bytes = (n_high * _HIGH_BYTES + n_int8 * _INT8_BYTES) * elems * 2
        scale_bytes = len(self.segments) * _SCALE_BYTES * elems * 2
        return entry_bytes + scale_bytes

    # -- debugging snapshot ----------------------------------------------------

    _SNAP_MAGIC = b"CKVS"

    def write_snapshot(self, path, layer_id: int) -> None:
        """Binary dump: little-endian header then row-major K, V, meta.

        Layout: magic "CKVS", then uint32 layer_id, valid_len, heads,
        head_dim; K then V as float32 [valid_len, heads, head_dim]
        (dequantized view); positions and steps as int64; EMA as float64;
        seen flags as uint8.
        """
        k, v = self.effective_kv()
        n = self.valid_len
        with open(path, "wb") as f:
            f.write(self._SNAP_MAGIC)
            f.write(struct.pack("<4I", layer_id, n, self.num_heads, self.head_dim))
            f.write(np.ascontiguousarray(k, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(self.positions[:n], dtype="<i8").tobytes())
            f.write(np.ascontiguousarray(self.steps[:n], dtype="<i8").tobytes())
            f.write(np.ascontiguousarray(self.ema[:n], dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(self.seen[:n], dtype=np.uint8).tobytes())


def read_snapshot(path) -> dict:
    """Parse a debugging snapshot back into arrays."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != LayerCache._SNAP_MAGIC:
            raise ValueError(f"not a cache snapshot (magic {magic!r})")
        layer_id, n, heads, dim = struct.unpack("<4I", f.read(16))
        count = n * heads * dim
        k = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(n, heads, dim)
        v = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(n, heads, dim)
        positions = np.frombuffer(f.read(8 * n), dtype="<i8")
        steps = np.frombuffer(f.read(8 * n), dtype="<i8")
        ema = np.frombuffer(f.read(8 * n), dtype="<f8")
        seen = np.frombuffer(f.read(n), dtype=np.uint8).astype(bool)
    return {
        "layer_id": layer_id,
        "valid_len": n,
        "num_heads": heads,
        "head_dim": dim,
        "keys": k,
        "values": v,
        "positions": positions,
        "steps": steps,
        "ema": ema,
        "seen": seen,
    }
