"""Self-contained drivers for the policy engine.

Two input sources share the decode loop: a tiny seeded reference
transformer whose forward pass reads the managed cache, and synthetic
traces that script per-step confidence and attention patterns (including
planted needles) for deterministic policy experiments. The model is
untrained; it validates mechanics and determinism, not output quality.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .attention import naive_attention, tiled_attention
from .cache import LayerCache
from .config import ModelShape, PolicyConfig
from .confidence import confidence_score
from .policy import DecodePolicy, StepRecord
from .rng import SeededRng, mix_u64

HIGH_C = 0.85
LOW_C = 0.45


class ReferenceModel:
    """Decoder stack with seeded random weights.

    forward() is deterministic given (seed, token, cache state). Layer
    structure: per-layer Q/K/V/O projections with a residual add, then a
    vocabulary projection scaled by logit_gain so the next-token
    distribution is peaky enough to spread confidence across both sides
    of the usual thresholds.
    """

    def __init__(self, shape: ModelShape, seed: int, logit_gain: float = 8.0):
        self.shape = shape
        self.seed = seed
        self.logit_gain = logit_gain
        d = shape.num_heads * shape.head_dim
        self.d_model = d
        rng = SeededRng(seed).spawn(0x6D6F64)
        scale = 1.0 / math.sqrt(d)

        def mat(rows, cols, s):
            return rng.normal(rows * cols).reshape(rows, cols) * s

        self.embedding = mat(shape.vocab_size, d, 1.0)
        self.w_q = [mat(d, d, scale) for _ in range(shape.num_layers)]
        self.w_k = [mat(d, d, scale) for _ in range(shape.num_layers)]
        self.w_v = [mat(d, d, scale) for _ in range(shape.num_layers)]
        self.w_o = [mat(d, d, scale) for _ in range(shape.num_layers)]
        self.w_out = mat(d, shape.vocab_size, scale * logit_gain)

    def forward(
        self,
        token_id: int,
        caches: list[LayerCache],
        block_size: int = 128,
        attention_impl: str = "tiled",
    ) -> tuple[np.ndarray, list[np.ndarray], list[tuple[np.ndarray, np.ndarray]]]:
        """One decode forward pass over the current cache contents.

        Returns (logits, per-layer attention rows, per-layer new (K, V)).
        Does not mutate the caches; empty layers contribute nothing to
        the residual stream and get an empty attention row.
        """
        if self.shape.vocab_size < 1:
            raise ValueError("empty vocabulary")
        h, hd = self.shape.num_heads, self.shape.head_dim
        x = self.embedding[int(token_id)].copy()
        rows: list[np.ndarray] = []
        new_kv: list[tuple[np.ndarray, np.ndarray]] = []
        for layer, cache in enumerate(caches):
            q = (x @ self.w_q[layer]).reshape(h, hd)
            k = (x @ self.w_k[layer]).reshape(h, hd)
            v = (x @ self.w_v[layer]).reshape(h, hd)
            if cache.valid_len > 0:
                if attention_impl == "tiled":
                    out, w = tiled_attention(q, cache, block_size)
                else:
                    keys, values = cache.effective_kv()
                    out, w = naive_attention(q, keys, values)
                x = x + out.reshape(-1) @ self.w_o[layer]
                rows.append(w)
            else:
                rows.append(np.zeros((h, 0)))
            new_kv.append((k.astype(np.float32), v.astype(np.float32)))
        return x @ self.w_out, rows, new_kv


# -- synthetic traces ----------------------------------------------------------


@dataclass
class TraceStep:
    logits: np.ndarray
    spike: bool
    target_confidence: float | None


@dataclass
class SyntheticTrace:
    """Scripted decode inputs.

    Attention rows are materialized at run time against the surviving
    cache entries: on spike steps the needle entry receives spike_mass
    head-mean attention and the rest share the remainder uniformly;
    otherwise mass is uniform. K/V vectors are drawn statelessly from
    (kv_seed, phase, index, layer), so every policy replaying the trace
    sees identical inputs.
    """

    shape: ModelShape
    prefill_len: int
    steps: list[TraceStep]
    needle_position: int | None = None
    query_step: int | None = None
    spike_mass: float = 0.0
    kv_seed: int = 0

    def __len__(self) -> int:
        return len(self.steps)

    def kv_draw(self, phase: int, index: int, layer: int) -> tuple[np.ndarray, np.ndarray]:
        h, hd = self.shape.num_heads, self.shape.head_dim
        rng = SeededRng(mix_u64(self.kv_seed, phase, index, layer))
        buf = rng.normal(2 * h * hd).reshape(2, h, hd)
        return buf[0].astype(np.float32), buf[1].astype(np.float32)

    def attention_rows(self, step: int, cache: LayerCache) -> np.ndarray:
        n = cache.valid_len
        h = self.shape.num_heads
        row = np.full(n, 1.0 / n)
        ts = self.steps[step - 1]
        if ts.spike and self.needle_position is not None:
            hits = np.nonzero(cache.positions[:n] == self.needle_position)[0]
            if hits.size == 1 and n > 1:
                row = np.full(n, (1.0 - self.spike_mass) / (n - 1))
                row[hits[0]] = self.spike_mass
            elif hits.size == 1:
                row = np.array([1.0])
        return np.broadcast_to(row, (h, n)).copy()

    # -- JSONL persistence -------------------------------------------------

    def write_jsonl(self, path) -> None:
        header = {
            "kind": "confkv-trace",
            "num_layers": self.shape.num_layers,
            "num_heads": self.shape.num_heads,
            "head_dim": self.shape.head_dim,
            "vocab_size": self.shape.vocab_size,
            "prefill_len": self.prefill_len,
            "needle_position": self.needle_position,
            "query_step": self.query_step,
            "spike_mass": self.spike_mass,
            "kv_seed": self.kv_seed,
        }
        with open(path, "w") as f:
            f.write(json.dumps(header) + "\n")
            for i, ts in enumerate(self.steps, start=1):
                f.write(json.dumps({
                    "step": i,
                    "logits": [float(x) for x in ts.logits],
                    "spike": ts.spike,
                    "target_confidence": ts.target_confidence,
                }) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "SyntheticTrace":
        with open(path) as f:
            header = json.loads(f.readline())
            if header.get("kind") != "confkv-trace":
                raise ValueError(f"{path} is not a trace file")
            steps = []
            for line in f:
                if not line.strip():
                    continue
                d = json.loads(line)
                steps.append(TraceStep(
                    logits=np.asarray(d["logits"], dtype=np.float64),
                    spike=bool(d["spike"]),
                    target_confidence=d.get("target_confidence"),
                ))
        shape = ModelShape(
            num_layers=header["num_layers"],
            num_heads=header["num_heads"],
            head_dim=header["head_dim"],
            vocab_size=header["vocab_size"],
        )
        return cls(
            shape=shape,
            prefill_len=header["prefill_len"],
            steps=steps,
            needle_position=header.get("needle_position"),
            query_step=header.get("query_step"),
            spike_mass=header.get("spike_mass", 0.0),
            kv_seed=header["kv_seed"],
        )


_INVERT_CACHE: dict[tuple, np.ndarray] = {}


def invert_confidence(
    target: float, vocab_size: int, weights: tuple[float, float, float]
) -> np.ndarray:
    """Distribution hitting a target confidence within about 1e-3.

    Bisects the top-token mass q of a two-level distribution (q on one
    token, the rest uniform). Targets outside the reachable range clamp
    to its ends. Results are memoized; traces reuse a handful of levels.
    """
    key = (target, vocab_size, weights)
    cached = _INVERT_CACHE.get(key)
    if cached is not None:
        return cached
    v = vocab_size

    def score(q: float) -> float:
        rest = (1.0 - q) / (v - 1)
        p = np.full(v, rest)
        p[0] = q
        return confidence_score(p, weights).score

    lo, hi = 1.0 / v + 1e-9, 1.0 - 1e-12
    if target <= score(lo):
        q = lo
    elif target >= score(hi):
        q = hi
    else:
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if score(mid) < target:
                lo = mid
            else:
                hi = mid
        q = 0.5 * (lo + hi)
    p = np.full(v, (1.0 - q) / (v - 1))
    p[0] = q
    _INVERT_CACHE[key] = p
    return p


def _profile_targets(profile, length: int, query_step: int | None) -> list[float]:
    if isinstance(profile, (list, tuple, np.ndarray)):
        if len(profile) != length:
            raise ValueError(f"profile length {len(profile)} != steps {length}")
        return [float(x) for x in profile]
    if profile == "always_high":
        return [HIGH_C] * length
    if profile == "always_low":
        return [LOW_C] * length
    if profile.startswith("alternating:"):
        k = int(profile.split(":", 1)[1])
        if k < 1:
            raise ValueError("alternating profile needs k >= 1")
        out = []
        while len(out) < length:
            out.extend([LOW_C] * k)
            out.append(HIGH_C)
        return out[:length]
    if profile == "dip_at_query":
        if query_step is None:
            raise ValueError("dip_at_query requires a query step")
        out = [HIGH_C] * length
        out[query_step - 1] = LOW_C
        return out
    raise ValueError(f"unknown confidence profile {profile!r}")


def generate_profile_trace(
    rng: SeededRng,
    length: int,
    confidence_profile,
    shape: ModelShape | None = None,
    prefill_len: int = 16,
    weights: tuple[float, float, float] = (0.4, 0.3, 0.3),
    query_step: int | None = None,
) -> SyntheticTrace:
    """Trace with scripted confidence and uniform attention, no needle."""
    shape = shape or ModelShape(num_layers=1)
    targets = _profile_targets(confidence_profile, length, query_step)
    steps = []
    for t, target in enumerate(targets, start=1):
        p = invert_confidence(target, shape.vocab_size, weights)
        logits = np.roll(np.log(p), t % shape.vocab_size)
        steps.append(TraceStep(logits=logits, spike=False, target_confidence=target))
    return SyntheticTrace(
        shape=shape,
        prefill_len=prefill_len,
        steps=steps,
        kv_seed=rng.next_u64(),
    )


def generate_needle_trace(
    rng: SeededRng,
    length: int,
    needle_position: int,
    query_step: int,
    spike_mass: float,
    confidence_profile="dip_at_query",
    shape: ModelShape | None = None,
    prefill_len: int = 16,
    spike_period: int = 8,
    weights: tuple[float, float, float] = (0.4, 0.3, 0.3),
) -> SyntheticTrace:
    """Trace with one planted needle that receives periodic attention
    spikes and a confidence dip at the retrieval query.

    needle_position is an original position in the full sequence
    (prefill tokens occupy 0..prefill_len-1; generated tokens continue).
    """
    if not 1 <= query_step <= length:
        raise ValueError(f"query_step {query_step} outside [1, {length}]")
    if not 0 <= needle_position < prefill_len + query_step - 1:
        raise ValueError(
            f"needle_position {needle_position} must precede the query step's cache"
        )
    if not 0.0 < spike_mass <= 1.0:
        raise ValueError(f"spike_mass must lie in (0, 1], got {spike_mass}")

    trace = generate_profile_trace(
        rng, length, confidence_profile, shape, prefill_len, weights, query_step
    )
    # first step at which the needle is already cached
    first_obs = 1 if needle_position < prefill_len else needle_position - prefill_len + 2
    for t in range(first_obs, length + 1, spike_period):
        trace.steps[t - 1].spike = True
    trace.steps[query_step - 1].spike = True
    trace.needle_position = needle_position
    trace.query_step = query_step
    trace.spike_mass = spike_mass
    return trace


def retention_suite(
    seed: int,
    count: int,
    length: int = 320,
    query_step: int = 300,
    prefill_len: int = 16,
    near_gap: tuple[int, int] = (60, 120),
    far_gap: tuple[int, int] = (140, 190),
    far_fraction: float = 0.2,
    spike_mass: float = 0.35,
    shape: ModelShape | None = None,
) -> list[SyntheticTrace]:
    """Seeded needle traces for retention comparisons and sweeps.

    The needle-to-query gap is randomized on both sides of the tight
    budget horizon: most needles sit within it (a recency policy can
    still hold them) and the rest beyond it, so victim-selection
    strategies separate cleanly.
    """
    rng = SeededRng(seed).spawn(0x6E646C)
    traces = []
    for _ in range(count):
        lo, hi = far_gap if rng.uniform() < far_fraction else near_gap
        gap = lo + rng.integers(hi - lo + 1)
        needle_step = query_step - gap
        traces.append(generate_needle_trace(
            rng,
            length,
            needle_position=prefill_len + needle_step - 1,
            query_step=query_step,
            spike_mass=spike_mass,
            shape=shape,
        ))
    return traces


# -- drivers and the decode loop ----------------------------------------------


class ModelDriver:
    """Feeds the policy from the reference model's forward pass."""

    def __init__(self, model: ReferenceModel, prompt_tokens, block_size: int = 128):
        self.model = model
        self.prompt = [int(t) for t in prompt_tokens]
        if not self.prompt:
            raise ValueError("model driver needs at least one prompt token")
        self.block_size = block_size
        self.shape = model.shape
        self.prefill_len = len(self.prompt)
        self.needle_position = None
        self.query_step = None

    def prefill(self, policy: DecodePolicy) -> None:
        for pos, token in enumerate(self.prompt):
            _, _, new_kv = self.model.forward(token, policy.caches, self.block_size)
            for layer, (k, v) in enumerate(new_kv):
                policy.append_prefill(layer, k, v, pos)

    def first_token(self) -> int:
        return self.prompt[-1]

    def step_inputs(self, step: int, caches: list[LayerCache], token: int):
        return self.model.forward(token, caches, self.block_size)


class TraceDriver:
    """Feeds the policy from a synthetic trace."""

    def __init__(self, trace: SyntheticTrace):
        self.trace = trace
        self.shape = trace.shape
        self.prefill_len = trace.prefill_len
        self.needle_position = trace.needle_position
        self.query_step = trace.query_step

    def prefill(self, policy: DecodePolicy) -> None:
        for pos in range(self.trace.prefill_len):
            for layer in range(self.shape.num_layers):
                k, v = self.trace.kv_draw(0, pos, layer)
                policy.append_prefill(layer, k, v, pos)

    def first_token(self) -> int:
        return 0

    def step_inputs(self, step: int, caches: list[LayerCache], token: int):
        if step > len(self.trace.steps):
            raise RuntimeError(
                f"trace exhausted: step {step} > {len(self.trace.steps)} scripted steps"
            )
        ts = self.trace.steps[step - 1]
        rows = [self.trace.attention_rows(step, cache) for cache in caches]
        new_kv = [
            self.trace.kv_draw(1, step, layer) for layer in range(self.shape.num_layers)
        ]
        return ts.logits, rows, new_kv


@dataclass
class RunResult:
    records: list[StepRecord]
    needle_retained: bool | None  # None when the driver has no needle
    policy_name: str
    prefill_len: int


def run_decode(policy: DecodePolicy, driver, steps: int, sink=None) -> RunResult:
    """Drive one policy for `steps` decode steps.

    Emits one StepRecord per step, optionally writing each as a JSONL
    line to `sink`. When the driver carries a needle annotation, records
    whether the needle was still cached in every layer at the moment the
    query step's inputs were computed.
    """
    policy.begin_prefill(driver.prefill_len)
    driver.prefill(policy)
    token = driver.first_token()
    records: list[StepRecord] = []
    retained: bool | None = None
    for t in range(1, steps + 1):
        logits, rows, new_kv = driver.step_inputs(t, policy.caches, token)
        if driver.query_step == t and driver.needle_position is not None:
            retained = all(
                (c.positions[: c.valid_len] == driver.needle_position).any()
                for c in policy.caches
            )
        rec = policy.step(logits, rows, new_kv, t)
        records.append(rec)
        if sink is not None:
            sink.write(json.dumps(rec.to_dict()) + "\n")
        token = rec.token
    return RunResult(
        records=records,
        needle_retained=retained,
        policy_name=policy.name,
        prefill_len=driver.prefill_len,
    )
