"""Confidence-gated cache management: ranking, budget enforcement,
protected window, pyramidal per-layer budgets, and the per-step engine.

One step runs in a fixed order: softmax, confidence, budget selection,
then per layer EMA update / rank / evict / compact, quantization of
entries outside the high-precision window, the append of the new entry
(always high precision, never quantized in the same step), and finally
sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import naive_attention  # noqa: F401  (re-exported for drivers)
from .cache import LayerCache
from .confidence import ConfidenceFeatures, confidence_score, select_budget, stable_softmax
from .config import ModelShape, PolicyConfig
from .quantizer import apply_fp16_window
from .rng import SeededRng


@dataclass
class CandidateRanking:
    """Composite scores for the non-protected entries of one layer."""

    indices: np.ndarray         # storage indices of candidates
    attention_norm: np.ndarray  # min-max normalized EMA mass
    recency_norm: np.ndarray    # min-max normalized generation step
    composite: np.ndarray       # alpha * attention + (1 - alpha) * recency


@dataclass
class StepRecord:
    """One trace row: what the policy saw and did at a step."""

    step: int
    confidence: float
    entropy_norm: float
    margin: float
    margin_sig: float
    top_prob: float
    budget: int | None
    len_pre: list[int]      # per-layer valid_len when attention was computed
    len_post: list[int]     # per-layer valid_len after eviction, before append
    evicted: list[int]
    int8: list[int]         # per-layer INT8 entry count before append
    memory_bytes: int       # across layers, after append
    token: int

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "confidence": self.confidence,
            "entropy_norm": self.entropy_norm,
            "margin": self.margin,
            "margin_sig": self.margin_sig,
            "top_prob": self.top_prob,
            "budget": self.budget,
            "len_pre": self.len_pre,
            "len_post": self.len_post,
            "evicted": self.evicted,
            "int8": self.int8,
            "memory_bytes": self.memory_bytes,
            "token": self.token,
        }


def _minmax(x: np.ndarray) -> np.ndarray:
    lo = x.min()
    hi = x.max()
    if hi == lo:
        return np.zeros_like(x, dtype=np.float64)
    return (x - lo) / (hi - lo)


def rank_candidates(cache: LayerCache, alpha: float, protected_p: int) -> CandidateRanking:
    """Score the non-protected entries of a layer.

    The protected set is the protected_p entries with the largest
    original positions. Attention mass and recency are min-max
    normalized over the candidates only; a degenerate feature (all
    candidates equal) contributes 0 for everyone.
    """
    n = cache.valid_len
    if n <= protected_p:
        raise ValueError(f"no candidates: valid_len {n} <= protected_p {protected_p}")
    # entries are sorted by original_position, so the last protected_p
    # storage slots are exactly the protected set
    cut = n - protected_p
    idx = np.arange(cut)
    a_hat = _minmax(cache.ema[:cut])
    r_hat = _minmax(cache.steps[:cut].astype(np.float64))
    composite = alpha * a_hat + (1.0 - alpha) * r_hat
    return CandidateRanking(
        indices=idx, attention_norm=a_hat, recency_norm=r_hat, composite=composite
    )


def select_victims(
    cache: LayerCache, count: int, protected_p: int, alpha: float
) -> np.ndarray:
    """Storage indices of the `count` lowest-composite candidates.

    Ties go to the smaller original position (older first), then the
    smaller storage index; under the sorted-storage invariant those
    coincide.
    """
    ranking = rank_candidates(cache, alpha, protected_p)
    order = np.lexsort((ranking.indices, ranking.composite))
    return ranking.indices[order[:count]]


def evict_to_budget(cache: LayerCache, n: int, protected_p: int, alpha: float) -> int:
    """Evict lowest-scored non-protected entries until valid_len <= n."""
    if n < protected_p:
        raise ValueError(f"budget {n} smaller than protected window {protected_p}")
    excess = cache.valid_len - n
    if excess <= 0:
        return 0
    victims = select_victims(cache, excess, protected_p, alpha)
    keep = np.ones(cache.valid_len, dtype=bool)
    keep[victims] = False
    return cache.compact(keep)


def pyramid_budget(
    layer_index: int, shape: ModelShape, n0: int, beta: float, n_min: int
) -> int:
    """Depth-decayed budget: max(n_min, floor(n0 * beta ** (layer/L)))."""
    if not 0 <= layer_index <= shape.num_layers:
        raise ValueError(f"layer_index {layer_index} outside [0, {shape.num_layers}]")
    raw = n0 * beta ** (layer_index / shape.num_layers)
    return max(n_min, math.floor(raw))


@dataclass
class EvictionEvent:
    step: int
    layer: int
    evict_count: int


class DecodePolicy:
    """Base for everything that owns per-layer caches and reacts to one
    decode step at a time. Subclasses implement _manage()."""

    name = "base"

    def __init__(self, config: PolicyConfig, shape: ModelShape):
        self.config = config
        self.shape = shape
        self.caches = [
            LayerCache(shape.num_heads, shape.head_dim) for _ in range(shape.num_layers)
        ]
        self.sample_rng = SeededRng(config.seed).spawn(0x73616D70)  # "samp"
        self.steps_run = 0
        self.prefill_len = 0

    # -- prefill -------------------------------------------------------------

    def append_prefill(self, layer: int, k: np.ndarray, v: np.ndarray, position: int) -> None:
        """Prefill entries get nonpositive generation steps so the
        high-precision window ages them out first."""
        self.caches[layer].append(k, v, position, position - self.prefill_len)

    def begin_prefill(self, prefill_len: int) -> None:
        self.prefill_len = prefill_len

    # -- stepping ------------------------------------------------------------

    def _distribution(self, logits: np.ndarray) -> np.ndarray:
        cfg = self.config
        if cfg.sampling_mode == "temperature":
            logits = np.asarray(logits, dtype=np.float64) / cfg.temperature
        return stable_softmax(logits)

    def _sample(self, p: np.ndarray) -> int:
        if self.config.sampling_mode == "greedy":
            return int(np.argmax(p))  # ties resolve to the smallest id
        u = self.sample_rng.uniform()
        return int(np.searchsorted(np.cumsum(p), u, side="right").clip(0, p.shape[0] - 1))

    def step(
        self,
        logits: np.ndarray,
        attention_rows: list[np.ndarray],
        new_kv: list[tuple[np.ndarray, np.ndarray]],
        step: int,
    ) -> StepRecord:
        """Run one management step; returns the trace row."""
        if len(attention_rows) != len(self.caches) or len(new_kv) != len(self.caches):
            raise ValueError("attention_rows and new_kv must have one entry per layer")
        p = self._distribution(logits)
        feats = confidence_score(p, self.config.confidence_weights)
        len_pre = [c.valid_len for c in self.caches]

        budget, len_post, evicted, int8 = self._manage(feats, attention_rows, step)

        position = self.prefill_len + step - 1
        for layer, cache in enumerate(self.caches):
            k, v = new_kv[layer]
            cache.append(k, v, position, step)

        token = self._sample(p)
        self.steps_run += 1
        return StepRecord(
            step=step,
            confidence=feats.score,
            entropy_norm=feats.entropy_norm,
            margin=feats.margin,
            margin_sig=feats.margin_sig,
            top_prob=feats.top_prob,
            budget=budget,
            len_pre=len_pre,
            len_post=len_post,
            evicted=evicted,
            int8=int8,
            memory_bytes=sum(c.memory_bytes() for c in self.caches),
            token=token,
        )

    def _manage(self, feats, attention_rows, step):
        raise NotImplementedError


class ConfKVEngine(DecodePolicy):
    """The confidence-gated policy: budget tier from the score, composite
    attention/recency ranking within it, optional INT8 storage outside
    the high-precision window, optional pyramidal per-layer budgets."""

    def __init__(
        self,
        config: PolicyConfig,
        shape: ModelShape,
        quantize: bool = False,
        record_schedule: bool = False,
    ):
        super().__init__(config, shape)
        self.quantize = quantize
        self.schedule: list[EvictionEvent] | None = [] if record_schedule else None
        self.name = "confkv-l" if config.pyramid_enabled else (
            "confkv-int8" if quantize else "confkv"
        )

    def layer_budget(self, layer: int, tier: int) -> int:
        if not self.config.pyramid_enabled:
            return tier
        return pyramid_budget(
            layer, self.shape, tier, self.config.pyramid_beta, self.config.pyramid_n_min
        )

    def _manage(self, feats, attention_rows, step):
        cfg = self.config
        tier = select_budget(feats.score, cfg.n_high, cfg.n_low, cfg.tau)
        len_post, evicted, int8 = [], [], []
        for layer, cache in enumerate(self.caches):
            cache.update_attention_ema(attention_rows[layer], cfg.ema_lambda)
            n_layer = self.layer_budget(layer, tier)
            protected = min(cfg.protected_p, n_layer)
            gone = 0
            if cache.valid_len > n_layer:
                gone = evict_to_budget(cache, n_layer, protected, cfg.alpha)
                if self.schedule is not None and gone:
                    self.schedule.append(EvictionEvent(step, layer, gone))
            if self.quantize:
                apply_fp16_window(cache, cfg.fp16_window_w, step)
            len_post.append(cache.valid_len)
            evicted.append(gone)
            int8.append(cache.int8_count())
        return tier, len_post, evicted, int8
