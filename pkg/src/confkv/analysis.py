"""Mechanistic validation machinery and trace aggregation.

The context-ablation experiment probes the relation the eviction policy
relies on: if the model is confident, removing recent context should
barely move the next-token distribution. Probes run on cache copies, so
the live engine state is untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baselines import FullCachePolicy
from .cache import LayerCache
from .config import ModelShape, PolicyConfig
from .confidence import confidence_score, stable_softmax
from .policy import StepRecord
from .rng import SeededRng

_EPS = 1e-12


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats.

    q is floored at 1e-12 before the log; mass in p at or below the same
    floor contributes nothing, which keeps KL(p, p) exactly zero even
    for near-degenerate distributions.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    mask = p > _EPS
    pm = p[mask]
    qm = np.maximum(q[mask], _EPS)
    return float((pm * (np.log(pm) - np.log(qm))).sum())


def pearson(xs, ys) -> float:
    """Sample Pearson correlation; errors on n < 3 or a constant series."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-d and the same length")
    n = x.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 pairs, got {n}")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float(dx @ dx)
    sy = float(dy @ dy)
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation undefined for a constant series")
    return float((dx @ dy) / np.sqrt(sx * sy))


def _clone_prefix(cache: LayerCache, keep: int) -> LayerCache:
    """Copy of the cache holding only its first `keep` entries."""
    out = LayerCache(cache.num_heads, cache.head_dim, capacity=max(keep, 1))
    out.valid_len = keep
    out.keys[:keep] = cache.keys[:keep]
    out.values[:keep] = cache.values[:keep]
    out.k_codes[:keep] = cache.k_codes[:keep]
    out.v_codes[:keep] = cache.v_codes[:keep]
    out.positions[:keep] = cache.positions[:keep]
    out.steps[:keep] = cache.steps[:keep]
    out.ema[:keep] = cache.ema[:keep]
    out.seen[:keep] = cache.seen[:keep]
    out.segment_of[:keep] = cache.segment_of[:keep]
    out.segments = [s for s in cache.segments]
    return out


@dataclass
class AblationResult:
    pairs: list[tuple[float, float]]  # (confidence, kl_shift) per sampled step
    pearson_r: float
    sampled_steps: list[int]
    bin_confidence: list[float]  # mean confidence per decile
    bin_kl: list[float]          # mean KL per decile
    records: list[StepRecord]


def ablation_experiment(
    model,
    prompt_tokens,
    steps: int,
    ablate_r: int,
    samples: int,
    config: PolicyConfig | None = None,
    sample_steps: list[int] | None = None,
) -> AblationResult:
    """Measure how removing recent context shifts the next-token
    distribution, paired with the confidence at each sampled step.

    The base run keeps the full cache so context accumulates; at each
    sampled step the forward pass is recomputed on cache copies with the
    ablate_r newest entries removed and KL(full || ablated) recorded.
    """
    from .simulator import ModelDriver  # local import avoids a cycle

    config = config or PolicyConfig()
    driver = ModelDriver(model, prompt_tokens)
    policy = FullCachePolicy(config, model.shape)
    prefill = driver.prefill_len

    if sample_steps is None:
        # eligible steps have cache length prefill + t - 1 > ablate_r
        t_min = max(1, ablate_r - prefill + 2)
        eligible = np.arange(t_min, steps + 1)
        if samples > eligible.shape[0]:
            raise ValueError(
                f"cannot sample {samples} steps from {eligible.shape[0]} eligible"
            )
        rng = SeededRng(config.seed).spawn(0x61626C)
        pick = rng.choice_without_replacement(eligible.shape[0], samples)
        sample_steps = sorted(int(eligible[i]) for i in pick)
    sampled = set(sample_steps)

    policy.begin_prefill(prefill)
    driver.prefill(policy)
    token = driver.first_token()
    pairs: list[tuple[float, float]] = []
    records: list[StepRecord] = []
    for t in range(1, steps + 1):
        logits, rows, new_kv = driver.step_inputs(t, policy.caches, token)
        if t in sampled:
            n = policy.caches[0].valid_len
            if n <= ablate_r:
                raise ValueError(f"cache length {n} at step {t} not > ablate_r {ablate_r}")
            p_full = stable_softmax(logits)
            c = confidence_score(p_full, config.confidence_weights).score
            clones = [_clone_prefix(cache, cache.valid_len - ablate_r)
                      for cache in policy.caches]
            abl_logits, _, _ = model.forward(token, clones)
            kl = kl_divergence(p_full, stable_softmax(abl_logits))
            pairs.append((c, kl))
        rec = policy.step(logits, rows, new_kv, t)
        records.append(rec)
        token = rec.token

    cs = np.array([c for c, _ in pairs])
    kls = np.array([k for _, k in pairs])
    r = pearson(cs, kls) if cs.shape[0] >= 3 and cs.std() > 0 and kls.std() > 0 else float("nan")

    order = np.argsort(cs, kind="stable")
    bin_c, bin_k = [], []
    for chunk in np.array_split(order, 10):
        if chunk.size:
            bin_c.append(float(cs[chunk].mean()))
            bin_k.append(float(kls[chunk].mean()))
    return AblationResult(
        pairs=pairs,
        pearson_r=r,
        sampled_steps=sorted(sampled),
        bin_confidence=bin_c,
        bin_kl=bin_k,
        records=records,
    )


@dataclass
class TraceSummary:
    steps: int
    mean_cache_len: float   # mean over steps of the layer-mean length after append
    max_cache_len: int      # max over steps of the layer-max length after append
    eviction_rate: float    # fraction of steps with at least one eviction
    total_evicted: int
    peak_bytes: int
    mean_bytes: float
    confidence_histogram: list[int]  # 20 bins, edges at k/20

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "mean_cache_len": self.mean_cache_len,
            "max_cache_len": self.max_cache_len,
            "eviction_rate": self.eviction_rate,
            "total_evicted": self.total_evicted,
            "peak_bytes": self.peak_bytes,
            "mean_bytes": self.mean_bytes,
            "confidence_histogram": self.confidence_histogram,
        }


def summarize_trace(records: list[StepRecord]) -> TraceSummary:
    """Deterministic aggregates over one run's step records."""
    if not records:
        raise ValueError("cannot summarize an empty record list")
    # post-append length is one more than the post-eviction length
    step_means = [float(np.mean(r.len_post)) + 1.0 for r in records]
    step_maxes = [max(r.len_post) + 1 for r in records]
    evict_steps = sum(1 for r in records if any(e > 0 for e in r.evicted))
    confs = np.array([r.confidence for r in records])
    hist, _ = np.histogram(confs, bins=20, range=(0.0, 1.0))
    return TraceSummary(
        steps=len(records),
        mean_cache_len=float(np.mean(step_means)),
        max_cache_len=int(max(step_maxes)),
        eviction_rate=evict_steps / len(records),
        total_evicted=int(sum(sum(r.evicted) for r in records)),
        peak_bytes=max(r.memory_bytes for r in records),
        mean_bytes=float(np.mean([r.memory_bytes for r in records])),
        confidence_histogram=[int(x) for x in hist],
    )
