"""Static SVG reporting: outcome bar charts and abort-distance histograms.

SVG output is made byte-reproducible by pinning the matplotlib hash salt and
stripping the date metadata.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "mpclab"

import matplotlib.pyplot as plt

from .harness import ABORTED, COMPLETED, FAILED, RunRecord, alpha_tag


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_outcomes(summary_alpha: dict, alpha_key: str, path: Path) -> None:
    """Grouped bars of completed/failed/aborted percentages per formulation."""
    combos = sorted(summary_alpha.keys())
    kinds = [COMPLETED, FAILED, ABORTED]
    colors = {"completed": "#2a9d8f", "failed": "#e76f51", "aborted": "#e9c46a"}
    width = 0.27
    fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * len(combos)), 4.0))
    for j, kind in enumerate(kinds):
        vals = [summary_alpha[c][f"{kind}_pct"] for c in combos]
        ax.bar([i + (j - 1) * width for i in range(len(combos))], vals, width, label=kind, color=colors[kind])
    ax.set_xticks(range(len(combos)))
    ax.set_xticklabels(combos, rotation=30, ha="right")
    ax.set_ylabel("% of episodes")
    ax.set_title(f"Episode outcomes (alpha = {alpha_key})")
    ax.legend()
    ax.set_ylim(0, 100)
    fig.tight_layout()
    _save(fig, path)


def plot_abort_distances(records: list[RunRecord], alpha: float, path: Path) -> bool:
    """Histogram of joint-1 boundary distance at the abort trigger, per combo."""
    groups: dict[str, list[float]] = {}
    for rec in records:
        if rec.alpha == alpha and rec.boundary_distance is not None:
            groups.setdefault(rec.strategy, []).append(rec.boundary_distance)
    if not groups:
        return False
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for combo in sorted(groups):
        ax.hist(groups[combo], bins=12, alpha=0.55, label=combo)
    ax.set_xlabel("distance of joint 1 to its position bound [rad]")
    ax.set_ylabel("abort triggers")
    ax.set_title(f"Boundary distance at abort trigger (alpha = {format(alpha, 'g')})")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
    return True


def render_all(records: list[RunRecord], summary: dict, plot_dir: Path) -> None:
    plot_dir = Path(plot_dir)
    plot_dir.mkdir(parents=True, exist_ok=True)
    alphas = sorted({rec.alpha for rec in records})
    for alpha in alphas:
        a_key = format(alpha, "g")
        if a_key in summary:
            plot_outcomes(summary[a_key], a_key, plot_dir / f"outcomes_{alpha_tag(alpha)}.svg")
        plot_abort_distances(records, alpha, plot_dir / f"abort_distance_{alpha_tag(alpha)}.svg")
