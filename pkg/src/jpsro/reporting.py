"""Run bundles on disk: traces, aggregates, and figure rendering.

A run directory is self-contained and diffable:

    config.json          config echo, seed list, environment fingerprint
    trace-<seed>.jsonl   one IterationRecord per line (deterministic bytes)
    timings-<seed>.csv   wall-clock per iteration (kept out of the trace)
    policies-<seed>/     final population, one text file per policy
    aggregate.csv        mean/stdev across seeds per iteration
    plots/               SVG figures plus the exact CSV they were drawn from
"""

from __future__ import annotations

import csv
import io
import json
import platform
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .driver import IterationRecord, RunResult, record_from_json, record_to_json
from .policies import serialize_policy


def _fingerprint(seeds: list[int]) -> dict:
    import matplotlib
    import scipy
    return {
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "matplotlib": matplotlib.__version__,
        "seeds": seeds,
    }


def write_run_bundle(out_dir: str | Path, config_echo: dict,
                     results: dict[int, RunResult]) -> Path:
    """Persists per-seed traces, timings, final policies, and aggregates."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = sorted(results)
    payload = {"config": config_echo, "environment": _fingerprint(seeds)}
    (out / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    for seed in seeds:
        result = results[seed]
        lines = [record_to_json(r) for r in result.records]
        (out / f"trace-{seed}.jsonl").write_text("\n".join(lines) + "\n")
        with (out / f"timings-{seed}.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "wall_time_s"])
            for r in result.records:
                writer.writerow([r.iteration, f"{r.wall_time_s:.6f}"])
        pol_dir = out / f"policies-{seed}"
        pol_dir.mkdir(exist_ok=True)
        for p, policies in enumerate(result.populations):
            for k, pol in enumerate(policies):
                (pol_dir / f"player{p}-{k:03d}.txt").write_text(serialize_policy(pol))

    rows = aggregate_rows({s: results[s].records for s in seeds})
    write_csv(out / "aggregate.csv", rows)
    return out


def write_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def load_bundle(bundle_dir: str | Path) -> tuple[dict, dict[int, list[IterationRecord]]]:
    bundle = Path(bundle_dir)
    config = json.loads((bundle / "config.json").read_text())
    traces: dict[int, list[IterationRecord]] = {}
    for trace_file in sorted(bundle.glob("trace-*.jsonl")):
        seed = int(trace_file.stem.split("-")[1])
        lines = [ln for ln in trace_file.read_text().splitlines() if ln]
        traces[seed] = [record_from_json(ln) for ln in lines]
    if not traces:
        raise FileNotFoundError(f"no trace files in {bundle}")
    return config, traces


def aggregate_rows(traces: dict[int, list[IterationRecord]]) -> list[dict]:
    """Per-iteration mean and stdev across seeds, recomputable from traces."""
    if not traces or all(not t for t in traces.values()):
        raise ValueError("empty traces")
    num_players = len(next(iter(traces.values()))[0].cce_values)
    max_len = max(len(t) for t in traces.values())
    rows = []
    for i in range(max_len):
        gaps = [t[i].cce_gap for t in traces.values() if len(t) > i]
        values = np.array([t[i].cce_values for t in traces.values() if len(t) > i])
        row = {
            "iteration": i + 1,
            "num_seeds": len(gaps),
            "cce_gap_mean": float(np.mean(gaps)),
            "cce_gap_std": float(np.std(gaps)),
        }
        for p in range(num_players):
            row[f"value_p{p}_mean"] = float(np.mean(values[:, p]))
            row[f"value_p{p}_std"] = float(np.std(values[:, p]))
        rows.append(row)
    return rows


def support_stat_rows(traces: dict[int, list[IterationRecord]],
                      thresholds=(1e-3, 5e-3, 1e-2)) -> tuple[list[dict], list[dict]]:
    """Per-(seed, iteration) support counts plus mean/stdev across iterations."""
    per_iter = []
    for seed in sorted(traces):
        for r in traces[seed]:
            row = {"seed": seed, "iteration": r.iteration}
            for t in thresholds:
                row[f"support_gt_{t:g}"] = int(
                    np.sum(r.sigma.probabilities > t))
            per_iter.append(row)
    summary = []
    for t in thresholds:
        counts = [row[f"support_gt_{t:g}"] for row in per_iter]
        summary.append({
            "threshold": f"{t:g}",
            "mean": float(np.mean(counts)),
            "stdev": float(np.std(counts)),
        })
    return per_iter, summary


def plot_bundle(bundle_dir: str | Path, out_dir: str | Path) -> list[Path]:
    """Renders the gap/value figure (SVG) plus the exact CSV behind it."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    config, traces = load_bundle(bundle_dir)
    if all(not t for t in traces.values()):
        raise ValueError("traces are empty, nothing to plot")
    rows = aggregate_rows(traces)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    csv_path = out / "curves.csv"
    write_csv(csv_path, rows)

    iters = [r["iteration"] for r in rows]
    gap_mean = np.array([r["cce_gap_mean"] for r in rows])
    gap_std = np.array([r["cce_gap_std"] for r in rows])
    num_players = sum(1 for k in rows[0] if k.startswith("value_p") and k.endswith("_mean"))

    fig, (ax_gap, ax_val) = plt.subplots(1, 2, figsize=(9.2, 3.6))
    ax_gap.plot(iters, gap_mean, color="tab:blue", lw=1.6)
    ax_gap.fill_between(iters, np.maximum(gap_mean - gap_std, 0.0),
                        gap_mean + gap_std, color="tab:blue", alpha=0.25, lw=0)
    ax_gap.set_yscale("symlog", linthresh=1e-6)
    ax_gap.set_xlabel("iteration")
    ax_gap.set_ylabel("gap")
    ax_gap.set_title("full-game gap")
    for p in range(num_players):
        vm = np.array([r[f"value_p{p}_mean"] for r in rows])
        vs = np.array([r[f"value_p{p}_std"] for r in rows])
        ax_val.plot(iters, vm, lw=1.6, label=f"player {p}")
        ax_val.fill_between(iters, vm - vs, vm + vs, alpha=0.25, lw=0)
    ax_val.set_xlabel("iteration")
    ax_val.set_ylabel("value")
    ax_val.set_title("per-player values")
    ax_val.legend(frameon=False, fontsize=8)
    game = config.get("config", {}).get("game", "run")
    fig.suptitle(game, fontsize=10)
    fig.tight_layout()
    svg_path = out / "gap_values.svg"
    fig.savefig(svg_path)
    plt.close(fig)
    return [svg_path, csv_path]


def format_table(rows: list[dict]) -> str:
    """Fixed-width text table for terminal output."""
    if not rows:
        return "(empty)\n"
    cols = list(rows[0].keys())
    widths = {c: max(len(str(c)), max(len(_fmt(r[c])) for r in rows)) for c in cols}
    buf = io.StringIO()
    buf.write("  ".join(str(c).rjust(widths[c]) for c in cols) + "\n")
    for r in rows:
        buf.write("  ".join(_fmt(r[c]).rjust(widths[c]) for c in cols) + "\n")
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)
