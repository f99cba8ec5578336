"""Command-line entry point.

Subcommands:
    decode      run one policy and write a JSONL step trace + CSV summary
    compare     run several policies on the same driver, one CSV row each
    ablate      context-ablation experiment (confidence vs KL shift)
    sweep       re-run a parameter over a list of values, one CSV row each
    make-trace  generate a synthetic needle trace file
    report      render PNG figures from a run directory's outputs

All commands are deterministic under a fixed seed and config: repeated
invocations produce byte-identical JSONL and CSV outputs. The CONFKV_SEED
environment variable overrides the config seed. Exit codes: 0 success,
1 usage or config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from .analysis import ablation_experiment, summarize_trace
from .baselines import (
    FullCachePolicy,
    HeavyHitterPolicy,
    MatchedRatePolicy,
    SlidingWindowPolicy,
    write_schedule,
)
from .config import ConfigError, ModelShape, PolicyConfig, load_config, preset
from .policy import ConfKVEngine
from .rng import SeededRng
from .simulator import (
    ModelDriver,
    ReferenceModel,
    SyntheticTrace,
    TraceDriver,
    generate_needle_trace,
    retention_suite,
    run_decode,
)

POLICY_NAMES = (
    "confkv", "confkv-int8", "confkv-l", "full", "sliding", "heavy-hitter",
    "matched-random", "matched-recency", "matched-attention",
)
_MATCHED = {
    "matched-random": "random",
    "matched-recency": "recency_only",
    "matched-attention": "attention_only",
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _load_cfg(args) -> PolicyConfig:
    base = preset(args.profile)
    if args.config:
        cfg = load_config(Path(args.config).read_text(), base=base)
    else:
        cfg = base
    env_seed = os.environ.get("CONFKV_SEED")
    if env_seed is not None:
        try:
            cfg = cfg.replace(seed=int(env_seed))
        except ValueError as e:
            raise ConfigError(f"CONFKV_SEED must be an integer: {env_seed!r}") from e
    return cfg


def _make_policy(name: str, cfg: PolicyConfig, shape: ModelShape, args, schedule=None):
    if name == "confkv":
        return ConfKVEngine(cfg.replace(pyramid_enabled=False), shape)
    if name == "confkv-int8":
        return ConfKVEngine(cfg.replace(pyramid_enabled=False), shape, quantize=True)
    if name == "confkv-l":
        return ConfKVEngine(cfg.replace(pyramid_enabled=True), shape, quantize=True)
    if name == "full":
        return FullCachePolicy(cfg, shape)
    if name == "sliding":
        return SlidingWindowPolicy(cfg, shape, window=args.window)
    if name == "heavy-hitter":
        return HeavyHitterPolicy(cfg, shape, cap=args.cap)
    if name in _MATCHED:
        if schedule is None:
            raise ConfigError(f"{name} needs a recorded schedule; include confkv in --policies")
        return MatchedRatePolicy(cfg, shape, schedule, _MATCHED[name])
    raise ConfigError(f"unknown policy {name!r}; choose from {POLICY_NAMES}")


def _make_driver(spec: str, cfg: PolicyConfig, prefill: int):
    if spec == "model":
        shape = ModelShape()
        model = ReferenceModel(shape, seed=cfg.seed)
        prompt = SeededRng(cfg.seed).spawn(0x70726D70).integers(shape.vocab_size, prefill)
        return ModelDriver(model, prompt, block_size=cfg.block_size_b)
    if spec.startswith("trace:"):
        trace = SyntheticTrace.read_jsonl(spec[len("trace:"):])
        return TraceDriver(trace)
    raise ConfigError(f"driver must be 'model' or 'trace:<path>', got {spec!r}")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


_SUMMARY_HEADER = [
    "policy", "steps", "prefill", "mean_cache_len", "max_cache_len",
    "eviction_rate", "total_evicted", "peak_bytes", "mean_bytes", "config_hash",
]


def _summary_row(name: str, result, cfg: PolicyConfig) -> list:
    s = summarize_trace(result.records)
    return [
        name, s.steps, result.prefill_len, s.mean_cache_len, s.max_cache_len,
        s.eviction_rate, s.total_evicted, s.peak_bytes, s.mean_bytes,
        cfg.config_hash(),
    ]


def cmd_decode(args) -> int:
    cfg = _load_cfg(args)
    driver = _make_driver(args.driver, cfg, args.prefill)
    policy = _make_policy(args.policy, cfg, driver.shape, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trace.jsonl", "w") as sink:
        result = run_decode(policy, driver, args.steps, sink=sink)
    _write_csv(out / "summary.csv", _SUMMARY_HEADER, [_summary_row(policy.name, result, cfg)])
    detail = summarize_trace(result.records).to_dict()
    detail["policy"] = policy.name
    detail["config_hash"] = cfg.config_hash()
    if result.needle_retained is not None:
        detail["needle_retained"] = result.needle_retained
    (out / "summary.json").write_text(json.dumps(detail, sort_keys=True, indent=2) + "\n")
    print(f"wrote {out / 'trace.jsonl'} and {out / 'summary.csv'}")
    return 0


def cmd_compare(args) -> int:
    cfg = _load_cfg(args)
    names = [p.strip() for p in args.policies.split(",") if p.strip()]
    if len(names) < 2:
        raise ConfigError("compare needs at least 2 policies")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    schedule = None
    results: dict[str, object] = {}
    run_order = list(names)
    # matched-rate variants replay the confkv schedule, so record it first
    if any(n in _MATCHED for n in names):
        run_order = ["confkv"] + [n for n in names if n != "confkv"]

    for name in run_order:
        driver = _make_driver(args.driver, cfg, args.prefill)
        if name == "confkv" and schedule is None:
            policy = ConfKVEngine(cfg.replace(pyramid_enabled=False), driver.shape,
                                  record_schedule=True)
        else:
            policy = _make_policy(name, cfg, driver.shape, args, schedule=schedule)
        with open(out / f"trace-{name}.jsonl", "w") as sink:
            results[name] = run_decode(policy, driver, args.steps, sink=sink)
        if name == "confkv" and schedule is None:
            schedule = policy.schedule
            write_schedule(schedule, out / "schedule.jsonl")

    header = _SUMMARY_HEADER[:-1] + ["needle_retained", "config_hash"]
    rows = []
    for name in names:
        r = results[name]
        row = _summary_row(name, r, cfg)
        retained = "" if r.needle_retained is None else str(r.needle_retained)
        rows.append(row[:-1] + [retained, row[-1]])
    _write_csv(out / "compare.csv", header, rows)
    print(f"wrote {out / 'compare.csv'}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    if args.samples > args.steps:
        raise ConfigError(f"--samples {args.samples} exceeds --steps {args.steps}")
    shape = ModelShape()
    model = ReferenceModel(shape, seed=cfg.seed)
    prompt = SeededRng(cfg.seed).spawn(0x70726D70).integers(shape.vocab_size, args.prefill)
    result = ablation_experiment(
        model, prompt, steps=args.steps, ablate_r=args.ablate_r,
        samples=args.samples, config=cfg,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [[t, c, k] for t, (c, k) in zip(result.sampled_steps, result.pairs)]
    _write_csv(out / "pairs.csv", ["step", "confidence", "kl_shift"], rows)
    detail = {
        "pearson_r": result.pearson_r,
        "samples": len(result.pairs),
        "ablate_r": args.ablate_r,
        "bin_confidence": result.bin_confidence,
        "bin_kl": result.bin_kl,
        "config_hash": cfg.config_hash(),
    }
    (out / "ablate-summary.json").write_text(json.dumps(detail, sort_keys=True, indent=2) + "\n")
    print(f"pearson r = {result.pearson_r}")
    print(f"wrote {out / 'pairs.csv'}")
    return 0


_SWEEP_PARAMS = {"tau": "tau", "n_high": "n_high", "w": "fp16_window_w", "alpha": "alpha"}


def _parse_sweep_value(param: str, raw: str):
    if param in ("tau", "alpha"):
        return float(raw)
    if raw == "inf":
        return 10**9  # effectively disables the quantization window
    return int(raw)


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    if args.param not in _SWEEP_PARAMS:
        raise ConfigError(f"--param must be one of {sorted(_SWEEP_PARAMS)}")
    values = [_parse_sweep_value(args.param, v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    field = _SWEEP_PARAMS[args.param]
    traces = retention_suite(seed=cfg.seed, count=args.traces)

    rows = []
    for value in values:
        run_cfg = cfg.replace(**{field: value})
        retained = 0
        evict_rates, peaks, means, quant = [], [], [], []
        for tr in traces:
            driver = TraceDriver(tr)
            policy = _make_policy(args.policy, run_cfg, driver.shape, args)
            result = run_decode(policy, driver, len(tr))
            s = summarize_trace(result.records)
            evict_rates.append(s.eviction_rate)
            peaks.append(s.peak_bytes)
            means.append(s.mean_bytes)
            retained += bool(result.needle_retained)
            last = result.records[-1]
            quant.append(sum(last.int8) / max(sum(last.len_post), 1))
        rows.append([
            args.param, value,
            float(sum(evict_rates) / len(traces)),
            float(sum(means) / len(traces)),
            max(peaks),
            retained / len(traces),
            float(sum(quant) / len(traces)),
            run_cfg.config_hash(),
        ])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / "sweep.csv",
        ["param", "value", "eviction_rate", "mean_bytes", "peak_bytes",
         "retention_rate", "quantized_frac", "config_hash"],
        rows,
    )
    print(f"wrote {out / 'sweep.csv'}")
    return 0


def cmd_make_trace(args) -> int:
    cfg = _load_cfg(args)
    rng = SeededRng(cfg.seed).spawn(0x74726163)
    trace = generate_needle_trace(
        rng,
        length=args.length,
        needle_position=args.needle_position,
        query_step=args.query_step,
        spike_mass=args.spike_mass,
        confidence_profile=args.trace_profile,
        prefill_len=args.prefill,
        shape=ModelShape(num_layers=args.layers),
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trace.write_jsonl(out)
    print(f"wrote {out}")
    return 0


def cmd_report(args) -> int:
    from .report import render_run_dir

    written = render_run_dir(args.run, args.out)
    if not written:
        print("no renderable artifacts found", file=sys.stderr)
        return 2
    for p in written:
        print(f"wrote {p}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="confkv", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, driver=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--profile", default="wikitext",
                       choices=("wikitext", "niah", "vwa"), help="preset to start from")
        p.add_argument("--steps", type=int, default=500)
        p.add_argument("--prefill", type=int, default=16,
                       help="prompt length (model driver) and prefill length")
        p.add_argument("--out", required=True, help="output directory")
        if driver:
            p.add_argument("--driver", default="model", help="'model' or 'trace:<path>'")
            p.add_argument("--window", type=int, default=512,
                           help="sliding-window size for the sliding policy")
            p.add_argument("--cap", type=int, default=None,
                           help="cache cap for the heavy-hitter policy (default n_low)")

    p = sub.add_parser("decode", help="run one policy")
    common(p)
    p.add_argument("--policy", default="confkv", choices=POLICY_NAMES[:6])
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("compare", help="run several policies on one driver")
    common(p)
    p.add_argument("--policies", required=True,
                   help="comma-separated policy names (matched-* replay confkv's schedule)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("ablate", help="confidence vs KL shift from ablating recent context")
    common(p, driver=False)
    p.add_argument("--ablate-r", type=int, default=256, dest="ablate_r")
    p.add_argument("--samples", type=int, default=1200)
    p.set_defaults(func=cmd_ablate, steps=1500, prefill=300)

    p = sub.add_parser("sweep", help="sweep one parameter over synthetic needle traces")
    common(p, driver=False)
    p.add_argument("--param", required=True, choices=sorted(_SWEEP_PARAMS))
    p.add_argument("--values", required=True, help="comma-separated values ('inf' allowed for w)")
    p.add_argument("--policy", default="confkv",
                   choices=("confkv", "confkv-int8", "confkv-l"))
    p.add_argument("--traces", type=int, default=25)
    p.set_defaults(func=cmd_sweep, window=512, cap=None)

    p = sub.add_parser("make-trace", help="generate a synthetic needle trace file")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--profile", default="wikitext", choices=("wikitext", "niah", "vwa"))
    p.add_argument("--out", required=True, help="output trace path")
    p.add_argument("--length", type=int, default=320)
    p.add_argument("--prefill", type=int, default=16)
    p.add_argument("--needle-position", type=int, default=200, dest="needle_position")
    p.add_argument("--query-step", type=int, default=300, dest="query_step")
    p.add_argument("--spike-mass", type=float, default=0.35, dest="spike_mass")
    p.add_argument("--trace-profile", default="dip_at_query", dest="trace_profile")
    p.add_argument("--layers", type=int, default=1)
    p.set_defaults(func=cmd_make_trace)

    p = sub.add_parser("report", help="render figures from a run directory")
    p.add_argument("--run", required=True, help="directory with run outputs")
    p.add_argument("--out", default=None, help="figure directory (default: alongside)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failures
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
