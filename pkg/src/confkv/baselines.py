"""Comparison policies over the same cache and attention substrate:
full cache, sliding window, heavy hitter, and the matched-rate
isolation variants that replay a recorded eviction schedule while
changing only victim selection.
"""

from __future__ import annotations

import json

import numpy as np

from .cache import LayerCache
from .config import ModelShape, PolicyConfig
from .policy import DecodePolicy, EvictionEvent, select_victims
from .rng import SeededRng

CUM_ATTENTION = "cum_attention"


def sliding_window_step(cache: LayerCache, window_n: int) -> int:
    """Retain exactly the window_n entries with the largest original
    positions; returns the evicted count."""
    if window_n < 1:
        raise ValueError(f"window must be >= 1, got {window_n}")
    excess = cache.valid_len - window_n
    if excess <= 0:
        return 0
    keep = np.zeros(cache.valid_len, dtype=bool)
    keep[excess:] = True  # storage order is original_position order
    return cache.compact(keep)


def heavy_hitter_step(cache: LayerCache, cap_n: int, protected_p: int) -> int:
    """Retain the protected_p most recent entries plus the highest
    cumulative-attention candidates up to cap_n; ties evict older first.

    Cumulative attention lives in the cache's parallel metadata channel
    (see accumulate_attention).
    """
    if cap_n < protected_p:
        raise ValueError(f"cap {cap_n} smaller than protected window {protected_p}")
    excess = cache.valid_len - cap_n
    if excess <= 0:
        return 0
    cum = cache.ensure_aux(CUM_ATTENTION)
    cut = cache.valid_len - protected_p
    candidates = np.arange(cut)
    order = np.lexsort((candidates, cum[:cut]))
    victims = candidates[order[:excess]]
    keep = np.ones(cache.valid_len, dtype=bool)
    keep[victims] = False
    return cache.compact(keep)


def accumulate_attention(cache: LayerCache, head_attention: np.ndarray) -> None:
    """Add this step's head-averaged attention into the cumulative sums."""
    a = np.asarray(head_attention, dtype=np.float64)
    if a.shape != (cache.num_heads, cache.valid_len):
        raise ValueError(
            f"expected attention of shape {(cache.num_heads, cache.valid_len)}, got {a.shape}"
        )
    cum = cache.ensure_aux(CUM_ATTENTION)
    cum[: cache.valid_len] += a.mean(axis=0)


class FullCachePolicy(DecodePolicy):
    """No eviction; the reference memory ceiling."""

    name = "full"

    def _manage(self, feats, attention_rows, step):
        lens = [c.valid_len for c in self.caches]
        return None, lens, [0] * len(self.caches), [0] * len(self.caches)


class SlidingWindowPolicy(DecodePolicy):
    """Fixed recency window, independent of attention history."""

    def __init__(self, config: PolicyConfig, shape: ModelShape, window: int = 512):
        super().__init__(config, shape)
        self.window = window
        self.name = f"sliding-{window}"

    def _manage(self, feats, attention_rows, step):
        len_post, evicted = [], []
        for cache in self.caches:
            evicted.append(sliding_window_step(cache, self.window))
            len_post.append(cache.valid_len)
        return self.window, len_post, evicted, [0] * len(self.caches)


class HeavyHitterPolicy(DecodePolicy):
    """Keep historical heavy hitters by cumulative attention plus a
    protected recent window."""

    def __init__(self, config: PolicyConfig, shape: ModelShape, cap: int | None = None):
        super().__init__(config, shape)
        self.cap = cap if cap is not None else config.n_low
        self.name = f"heavy-hitter-{self.cap}"

    def _manage(self, feats, attention_rows, step):
        cfg = self.config
        len_post, evicted = [], []
        for layer, cache in enumerate(self.caches):
            accumulate_attention(cache, attention_rows[layer])
            evicted.append(heavy_hitter_step(cache, self.cap, cfg.protected_p))
            len_post.append(cache.valid_len)
        return self.cap, len_post, evicted, [0] * len(self.caches)


# -- matched-rate isolation variants ------------------------------------------


def write_schedule(events: list[EvictionEvent], path) -> None:
    """Schedule file: JSONL of {step, layer, evict_count}."""
    with open(path, "w") as f:
        for e in events:
            f.write(json.dumps(
                {"step": e.step, "layer": e.layer, "evict_count": e.evict_count}
            ) + "\n")


def read_schedule(path) -> list[EvictionEvent]:
    events = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            events.append(EvictionEvent(d["step"], d["layer"], d["evict_count"]))
    return events


MATCHED_MODES = ("random", "recency_only", "attention_only")


class MatchedRatePolicy(DecodePolicy):
    """Replay a recorded eviction schedule, changing only how victims
    are picked: uniformly at random, by recency alone, or by attention
    alone. All modes respect the protected window, so the constraint set
    matches the recorded run.
    """

    def __init__(
        self,
        config: PolicyConfig,
        shape: ModelShape,
        schedule: list[EvictionEvent],
        mode: str,
    ):
        if mode not in MATCHED_MODES:
            raise ValueError(f"mode must be one of {MATCHED_MODES}, got {mode!r}")
        super().__init__(config, shape)
        self.mode = mode
        self.name = f"matched-{mode.replace('_', '-')}"
        self._events: dict[tuple[int, int], int] = {}
        for e in schedule:
            key = (e.step, e.layer)
            if key in self._events:
                raise ValueError(f"duplicate schedule event for step {e.step} layer {e.layer}")
            self._events[key] = e.evict_count
        self.victim_rng = SeededRng(config.seed).spawn(0x76696374)  # "vict"

    def _pick_victims(self, cache: LayerCache, count: int) -> np.ndarray:
        protected = self.config.protected_p
        n_candidates = cache.valid_len - protected
        if count > n_candidates:
            raise ValueError(
                f"schedule demands {count} evictions but only {n_candidates} candidates"
            )
        if self.mode == "random":
            return self.victim_rng.choice_without_replacement(n_candidates, count)
        alpha = 0.0 if self.mode == "recency_only" else 1.0
        return select_victims(cache, count, protected, alpha)

    def _manage(self, feats, attention_rows, step):
        cfg = self.config
        len_post, evicted = [], []
        for layer, cache in enumerate(self.caches):
            cache.update_attention_ema(attention_rows[layer], cfg.ema_lambda)
            count = self._events.get((step, layer), 0)
            gone = 0
            if count:
                victims = self._pick_victims(cache, count)
                keep = np.ones(cache.valid_len, dtype=bool)
                keep[victims] = False
                gone = cache.compact(keep)
            len_post.append(cache.valid_len)
            evicted.append(gone)
        return None, len_post, evicted, [0] * len(self.caches)
