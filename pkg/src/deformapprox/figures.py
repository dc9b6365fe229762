"""Chart output for evaluation and benchmark runs.

Small savers around matplotlib's Agg backend; each writes one PNG next to
the delimited reports.  These are convenience views of numbers that already
live in the CSV files, so nothing downstream parses them.
"""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

logger = logging.getLogger(__name__)


def _finish(fig, path):
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    logger.info("wrote figure %s", path)


def save_loss_curve(loss_history, path, label: str = "train loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.semilogy(range(1, len(loss_history) + 1), loss_history, lw=1.0)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mse")
    ax.set_title(label)
    ax.grid(True, which="both", alpha=0.3)
    _finish(fig, path)


def save_error_curve(rows, path, label: str = "per-frame error") -> None:
    """rows: MetricsRow sequence; aggregate rows (frame -1) are skipped."""
    frames = [r.frame for r in rows if r.frame >= 0]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for attr in ("rmse", "max"):
        ax.plot(frames, [getattr(r, attr) for r in rows if r.frame >= 0],
                lw=1.0, label=attr)
    ax.set_xlabel("frame")
    ax.set_ylabel("vertex error")
    ax.set_title(label)
    ax.legend(loc="best", fontsize="small")
    ax.grid(True, alpha=0.3)
    _finish(fig, path)


def save_error_histogram(field, path, label: str = "vertex error") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(field, bins=40, color="#4878d0")
    ax.set_xlabel(label)
    ax.set_ylabel("vertices")
    _finish(fig, path)


def save_timing_bars(reports, path) -> None:
    """One bar per TimingReport, mean ms with a p95 whisker."""
    labels = [r.label for r in reports]
    means = [r.mean_ms for r in reports]
    p95s = [r.p95_ms for r in reports]
    fig, ax = plt.subplots(figsize=(1.6 + 1.1 * len(labels), 3.5))
    x = range(len(labels))
    ax.bar(x, means, color="#4878d0")
    ax.errorbar(x, means, yerr=[[0.0] * len(means),
                                [max(p - m, 0.0) for p, m in zip(p95s, means)]],
                fmt="none", ecolor="#333333", capsize=3)
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize="small")
    ax.set_ylabel("ms per frame")
    _finish(fig, path)
