"""Optional matplotlib figures drawn from finished runs.

Nothing here runs unless the CLI is given ``--figures``; the CSV bundle is the
primary output and every figure is derived from the same numbers.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .domain import HOUR, MINUTE, WorkloadTier  # noqa: E402
from .experiment import RunResult, latency_bins  # noqa: E402


def instance_figure(results: Sequence[RunResult], path: Path, bin_ms: int = 15 * MINUTE) -> Path:
    """Private instances (all models and regions) per 15-minute bin, one line per run."""
    fig, ax = plt.subplots(figsize=(8, 4))
    for res in results:
        series = res.ledger.count_series(bin_ms)
        if not series:
            continue
        total = np.sum([np.asarray(v) for v in series.values()], axis=0)
        hours = np.arange(len(total)) * bin_ms / HOUR
        ax.step(hours, total, where="post", label=f"{res.name} ({res.ledger.instance_hours():.0f} h)")
    ax.set_xlabel("hour")
    ax.set_ylabel("private instances")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def latency_figure(results: Sequence[RunResult], path: Path) -> Path:
    """P95 TTFT per 3-hour bin for the two interactive tiers."""
    tiers = (WorkloadTier.IW_F, WorkloadTier.IW_N)
    fig, axes = plt.subplots(1, len(tiers), figsize=(10, 4), sharey=True)
    for ax, tier in zip(axes, tiers):
        for res in results:
            rows = [r for r in latency_bins(res) if r["tier"] == tier.value and r["p95_ttft_ms"] != ""]
            if rows:
                ax.plot([r["bin_start_h"] for r in rows], [r["p95_ttft_ms"] / 1000 for r in rows],
                        marker="o", label=res.name)
        ax.set_title(f"{tier.value} P95 TTFT")
        ax.set_xlabel("bin start (hour)")
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("seconds")
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def utilization_figure(results: Sequence[RunResult], path: Path) -> Path:
    """Mean effective memory utilization per minute across endpoints, one line per run."""
    fig, ax = plt.subplots(figsize=(8, 4))
    for res in results:
        series = [np.asarray(v) for v in res.ledger.util_minutes.values() if len(v)]
        if not series:
            continue
        width = min(len(s) for s in series)
        mean = np.mean([s[:width] for s in series], axis=0)
        ax.plot(np.arange(width) / 60.0, mean, lw=0.8, label=res.name)
    ax.axhline(0.7, color="grey", ls="--", lw=0.8)
    ax.axhline(0.3, color="grey", ls=":", lw=0.8)
    ax.set_xlabel("hour")
    ax.set_ylabel("memory utilization")
    ax.set_ylim(0, 1)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_figures(results: Sequence[RunResult], out_dir) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return {
        "instances": instance_figure(results, out / "instances.png"),
        "latency": latency_figure(results, out / "latency.png"),
        "utilization": utilization_figure(results, out / "utilization.png"),
    }
