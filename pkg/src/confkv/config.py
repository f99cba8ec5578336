"""Policy configuration: parsing, validation, presets, serialization.

Config files are a single JSON document. Unknown keys are rejected so a
typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass


class ConfigError(ValueError):
    """Raised for malformed or invariant-violating configuration."""


@dataclass(frozen=True)
class ModelShape:
    """Dimensions of the model whose cache is being managed."""

    num_layers: int = 4
    num_heads: int = 4
    head_dim: int = 16
    vocab_size: int = 64

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "head_dim", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class PolicyConfig:
    """All policy hyperparameters.

    Immutable after load; safe to share between threads.
    """

    tau: float = 0.7
    n_high: int = 128
    n_low: int = 256
    protected_p: int = 32
    alpha: float = 0.65
    ema_lambda: float = 0.90
    fp16_window_w: int = 128
    block_size_b: int = 128
    w_entropy: float = 0.4
    w_margin: float = 0.3
    w_top: float = 0.3
    pyramid_enabled: bool = False
    pyramid_beta: float = 0.5
    pyramid_n_min: int = 96
    sampling_mode: str = "greedy"
    temperature: float | None = None
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.n_high <= self.n_low:
            raise ConfigError(
                f"invariant n_high <= n_low violated ({self.n_high} > {self.n_low})"
            )
        if not (self.protected_p <= self.pyramid_n_min <= self.n_high):
            raise ConfigError(
                "invariant protected_p <= pyramid_n_min <= n_high violated "
                f"({self.protected_p}, {self.pyramid_n_min}, {self.n_high})"
            )
        wsum = self.w_entropy + self.w_margin + self.w_top
        if abs(wsum - 1.0) > 1e-9:
            raise ConfigError(f"confidence weights do not sum to 1 (sum={wsum!r})")
        for name in ("w_entropy", "w_margin", "w_top"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        for name in ("tau", "alpha", "ema_lambda"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {v!r}")
        if self.block_size_b < 1:
            raise ConfigError(f"block_size_b must be >= 1, got {self.block_size_b}")
        if not (0.0 < self.pyramid_beta <= 1.0):
            raise ConfigError(f"pyramid_beta must lie in (0, 1], got {self.pyramid_beta!r}")
        if self.fp16_window_w < 0:
            raise ConfigError(f"fp16_window_w must be >= 0, got {self.fp16_window_w}")
        if self.protected_p < 0:
            raise ConfigError(f"protected_p must be >= 0, got {self.protected_p}")
        if self.sampling_mode not in ("greedy", "temperature"):
            raise ConfigError(f"unknown sampling_mode {self.sampling_mode!r}")
        if self.sampling_mode == "temperature":
            if self.temperature is None or not (
                math.isfinite(self.temperature) and self.temperature > 0
            ):
                raise ConfigError("temperature mode requires a positive finite temperature")
        elif self.temperature is not None:
            raise ConfigError("temperature is only valid with sampling_mode=temperature")

    @property
    def confidence_weights(self) -> tuple[float, float, float]:
        return (self.w_entropy, self.w_margin, self.w_top)

    def replace(self, **changes) -> "PolicyConfig":
        return dataclasses.replace(self, **changes)

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        if d["sampling_mode"] == "greedy":
            del d["temperature"]
            d["sampling_mode"] = "greedy"
        else:
            d["sampling_mode"] = {"temperature": d.pop("temperature")}
        return json.dumps(d, sort_keys=True)

    def config_hash(self) -> str:
        """Short stable digest used to tag output rows."""
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]


# Named presets. "wikitext" is the all-defaults column; the long-context
# presets widen budgets and the high-precision window.
PRESETS: dict[str, dict] = {
    "wikitext": {},
    "niah": {
        "n_high": 256,
        "n_low": 512,
        "protected_p": 64,
        "alpha": 0.70,
        "fp16_window_w": 256,
    },
    "vwa": {
        "n_high": 256,
        "n_low": 512,
        "protected_p": 64,
        "alpha": 0.65,
        "fp16_window_w": 256,
    },
}

_FIELD_NAMES = {f.name for f in dataclasses.fields(PolicyConfig)} - {"temperature"}


def preset(name: str) -> PolicyConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PolicyConfig(**PRESETS[name])


def load_config(text: str, base: PolicyConfig | None = None) -> PolicyConfig:
    """Parse and validate a JSON config document.

    Absent keys take their defaults (or the values of `base` when given);
    unknown keys are an error. Raises ConfigError naming the failing
    invariant.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a JSON object")

    unknown = set(raw) - _FIELD_NAMES
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    kwargs = dataclasses.asdict(base) if base is not None else {}
    kwargs.update(raw)

    mode = kwargs.get("sampling_mode", "greedy")
    if isinstance(mode, dict):
        extra = set(mode) - {"temperature"}
        if extra:
            raise ConfigError(f"unknown sampling_mode keys: {sorted(extra)}")
        if "temperature" not in mode:
            raise ConfigError("sampling_mode object requires a temperature")
        kwargs["sampling_mode"] = "temperature"
        kwargs["temperature"] = float(mode["temperature"])
    elif mode == "greedy":
        kwargs["sampling_mode"] = "greedy"
        kwargs["temperature"] = None
    elif mode == "temperature":
        # allowed when base already carries a temperature
        kwargs.setdefault("temperature", None)
    else:
        raise ConfigError(f"unknown sampling_mode {mode!r}")

    int_fields = {
        "n_high", "n_low", "protected_p", "fp16_window_w",
        "block_size_b", "pyramid_n_min", "seed",
    }
    for k in list(kwargs):
        if k in int_fields:
            v = kwargs[k]
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{k} must be an integer, got {v!r}")

    try:
        return PolicyConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from e
