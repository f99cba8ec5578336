"""Confidence-gated KV-cache management with mixed-precision storage,
exact blockwise attention, comparison baselines, and analysis harnesses.
"""

from .analysis import ablation_experiment, kl_divergence, pearson, summarize_trace
from .attention import naive_attention, tiled_attention
from .baselines import (
    FullCachePolicy,
    HeavyHitterPolicy,
    MatchedRatePolicy,
    SlidingWindowPolicy,
    heavy_hitter_step,
    sliding_window_step,
)
from .cache import LayerCache, QuantSegment, TokenMeta
from .config import ConfigError, ModelShape, PolicyConfig, load_config, preset
from .confidence import ConfidenceFeatures, confidence_score, select_budget, stable_softmax
from .policy import (
    ConfKVEngine,
    StepRecord,
    evict_to_budget,
    pyramid_budget,
    rank_candidates,
)
from .quantizer import apply_fp16_window, dequantize, quantize_segment
from .rng import SeededRng
from .simulator import (
    ModelDriver,
    ReferenceModel,
    SyntheticTrace,
    TraceDriver,
    generate_needle_trace,
    generate_profile_trace,
    retention_suite,
    run_decode,
)

__version__ = "0.1.0"

__all__ = [
    "ConfKVEngine",
    "ConfidenceFeatures",
    "ConfigError",
    "FullCachePolicy",
    "HeavyHitterPolicy",
    "LayerCache",
    "MatchedRatePolicy",
    "ModelDriver",
    "ModelShape",
    "PolicyConfig",
    "QuantSegment",
    "ReferenceModel",
    "SeededRng",
    "SlidingWindowPolicy",
    "StepRecord",
    "SyntheticTrace",
    "TokenMeta",
    "TraceDriver",
    "ablation_experiment",
    "apply_fp16_window",
    "confidence_score",
    "dequantize",
    "evict_to_budget",
    "generate_needle_trace",
    "generate_profile_trace",
    "heavy_hitter_step",
    "kl_divergence",
    "load_config",
    "naive_attention",
    "pearson",
    "preset",
    "pyramid_budget",
    "quantize_segment",
    "rank_candidates",
    "retention_suite",
    "run_decode",
    "select_budget",
    "sliding_window_step",
    "stable_softmax",
    "summarize_trace",
    "tiled_attention",
]
