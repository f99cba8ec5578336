"""Per-step confidence scoring and budget selection.

The score blends three views of the next-token distribution: how flat it
is (normalized entropy), how far the top candidate leads the runner-up
(log-prob margin through a sigmoid), and the top probability itself.
All three lie in [0, 1], so with weights summing to 1 the composite does
too. Entropy is measured in nats and normalized by ln(V); the composite
is invariant to the log base because numerator and denominator share it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Floor for the runner-up probability when the distribution is degenerate
# (fewer than two nonzero entries); keeps the margin finite.
P2_FLOOR = 1e-12


@dataclass(frozen=True)
class ConfidenceFeatures:
    entropy_norm: float  # H(p)/ln(V), in [0, 1]
    margin: float        # ln p(1) - ln p(2), nats, >= 0
    margin_sig: float    # logistic(margin), in [0.5, 1)
    top_prob: float      # p(1)
    score: float         # weighted composite, in (0, 1]


def stable_softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax; safe for logits up to +-1e4."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise ValueError(f"need a vector of at least 2 logits, got shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must all be finite")
    e = np.exp(logits - logits.max())
    return e / e.sum()


def confidence_score(
    distribution: np.ndarray, weights: tuple[float, float, float]
) -> ConfidenceFeatures:
    """Evaluate the composite confidence of a next-token distribution.

    Args:
        distribution: probability vector over V >= 2 tokens, summing to 1
            within 1e-6.
        weights: (w_entropy, w_margin, w_top), nonnegative, summing to 1.

    Returns:
        ConfidenceFeatures with all components and the composite score.
    """
    p = np.asarray(distribution, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 2:
        raise ValueError(f"need a distribution over at least 2 tokens, got shape {p.shape}")
    total = p.sum()
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"probabilities must sum to 1 within 1e-6, got {total!r}")
    if np.any(p < 0):
        raise ValueError("probabilities must be nonnegative")

    nz = p[p > 0]
    entropy = float(-(nz * np.log(nz)).sum())  # 0 * ln 0 contributes 0
    entropy_norm = entropy / np.log(p.shape[0])

    top2 = np.partition(p, -2)[-2:]
    p1 = float(top2[1])
    p2 = max(float(top2[0]), P2_FLOOR)
    margin = max(np.log(p1) - np.log(p2), 0.0)
    margin_sig = float(1.0 / (1.0 + np.exp(-margin)))

    w_h, w_m, w_p = weights
    score = w_h * (1.0 - entropy_norm) + w_m * margin_sig + w_p * p1
    return ConfidenceFeatures(
        entropy_norm=float(entropy_norm),
        margin=float(margin),
        margin_sig=margin_sig,
        top_prob=p1,
        score=float(score),
    )


def select_budget(score: float, n_high: int, n_low: int, tau: float) -> int:
    """Tight budget on confident steps, loose otherwise; c == tau is confident."""
    return n_high if score >= tau else n_low
