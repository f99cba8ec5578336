"""Figure rendering for run outputs.

Reads the JSONL traces and CSV tables a run directory contains and
writes PNG figures alongside them. Rendering is a separate pass so the
decode/compare/sweep commands stay measurement-only; any other plotting
tool can consume the same documented schemas.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path) as f:
        for line in f:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def _read_csv(path: Path) -> list[dict]:
    with open(path) as f:
        return list(csv.DictReader(f))


def render_trace_figures(trace_paths: list[Path], out_dir: Path) -> list[Path]:
    """Cache-length, memory, and confidence figures from step traces.

    Multiple traces (e.g. one per compared policy) share the length and
    memory axes so the envelopes are directly comparable.
    """
    written = []
    runs = []
    for p in trace_paths:
        rows = _read_jsonl(p)
        if not rows or "len_post" not in rows[0]:
            continue
        label = p.stem.replace("trace-", "").replace("trace", "") or "run"
        runs.append((label.strip("-") or "run", rows))
    if not runs:
        return written

    fig, (ax_len, ax_mem) = plt.subplots(1, 2, figsize=(10, 3.6))
    for label, rows in runs:
        steps = [r["step"] for r in rows]
        mean_len = [sum(r["len_post"]) / len(r["len_post"]) + 1 for r in rows]
        ax_len.plot(steps, mean_len, label=label, lw=1.0)
        ax_mem.plot(steps, [r["memory_bytes"] / 1024 for r in rows], label=label, lw=1.0)
    ax_len.set_xlabel("step")
    ax_len.set_ylabel("cache length (layer mean)")
    ax_len.legend(fontsize=8)
    ax_mem.set_xlabel("step")
    ax_mem.set_ylabel("KV bytes (KiB)")
    fig.tight_layout()
    path = out_dir / "cache_trace.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)

    # confidence trace and histogram for the first run
    label, rows = runs[0]
    fig, (ax_c, ax_h) = plt.subplots(1, 2, figsize=(10, 3.2))
    steps = [r["step"] for r in rows]
    confs = [r["confidence"] for r in rows]
    ax_c.plot(steps, confs, lw=0.8, color="C0")
    ax_c.set_xlabel("step")
    ax_c.set_ylabel("confidence")
    ax_c.set_ylim(0, 1)
    ax_h.hist(confs, bins=20, range=(0, 1), color="C0", alpha=0.7)
    ax_h.set_xlabel("confidence")
    ax_h.set_ylabel("steps")
    fig.tight_layout()
    path = out_dir / "confidence.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)
    return written


def render_compare_figure(compare_csv: Path, out_dir: Path) -> list[Path]:
    rows = _read_csv(compare_csv)
    if not rows:
        return []
    names = [r["policy"] for r in rows]
    peak = [float(r["peak_bytes"]) / 1024 for r in rows]
    fig, (ax_b, ax_r) = plt.subplots(1, 2, figsize=(10, 3.4))
    ax_b.bar(names, peak, color="C0", alpha=0.75)
    ax_b.set_ylabel("peak KV bytes (KiB)")
    ax_b.tick_params(axis="x", rotation=30)
    if any(r.get("needle_retained", "") != "" for r in rows):
        ret = [1.0 if r["needle_retained"] == "True" else 0.0 for r in rows]
        ax_r.bar(names, ret, color="C1", alpha=0.75)
        ax_r.set_ylabel("needle retained")
        ax_r.set_ylim(0, 1.05)
    else:
        ax_r.bar(names, [float(r["mean_cache_len"]) for r in rows], color="C1", alpha=0.75)
        ax_r.set_ylabel("mean cache length")
    ax_r.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    path = out_dir / "compare.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return [path]


def render_sweep_figure(sweep_csv: Path, out_dir: Path) -> list[Path]:
    rows = _read_csv(sweep_csv)
    if not rows:
        return []
    param = rows[0]["param"]
    xs = [float(r["value"]) for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    axes[0].plot(xs, [float(r["eviction_rate"]) for r in rows], "o-", color="C0")
    axes[0].set_ylabel("eviction rate")
    axes[1].plot(xs, [float(r["peak_bytes"]) / 1024 for r in rows], "o-", color="C1")
    axes[1].set_ylabel("peak KV bytes (KiB)")
    axes[2].plot(xs, [float(r["retention_rate"]) for r in rows], "o-", color="C2")
    axes[2].set_ylabel("needle retention rate")
    axes[2].set_ylim(-0.02, 1.05)
    for ax in axes:
        ax.set_xlabel(param)
    fig.tight_layout()
    path = out_dir / "sweep.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return [path]


def render_ablation_figure(pairs_csv: Path, out_dir: Path) -> list[Path]:
    rows = _read_csv(pairs_csv)
    if not rows:
        return []
    cs = [float(r["confidence"]) for r in rows]
    kls = [float(r["kl_shift"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ax.scatter(cs, kls, s=6, alpha=0.4, color="C0")
    ax.set_xlabel("confidence")
    ax.set_ylabel("KL shift from ablating recent context")
    fig.tight_layout()
    path = out_dir / "ablation.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return [path]


def render_run_dir(run_dir, out_dir=None) -> list[Path]:
    """Render every figure the directory's artifacts support."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    traces = sorted(
        p for p in run_dir.glob("*.jsonl")
        if p.name not in ("schedule.jsonl",) and _looks_like_step_trace(p)
    )
    if traces:
        written += render_trace_figures(traces, out_dir)
    if (run_dir / "compare.csv").exists():
        written += render_compare_figure(run_dir / "compare.csv", out_dir)
    if (run_dir / "sweep.csv").exists():
        written += render_sweep_figure(run_dir / "sweep.csv", out_dir)
    if (run_dir / "pairs.csv").exists():
        written += render_ablation_figure(run_dir / "pairs.csv", out_dir)
    return written


def _looks_like_step_trace(path: Path) -> bool:
    with open(path) as f:
        first = f.readline()
    if not first.strip():
        return False
    try:
        row = json.loads(first)
    except json.JSONDecodeError:
        return False
    return "len_post" in row and "confidence" in row
