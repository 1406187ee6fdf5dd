"""Matplotlib rendering of the affordability scatter to a PNG file."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .analysis import COLOR_GE_100, COLOR_LT_100, MAX_POINT_RADIUS_PX, ScatterPoint


def render_scatter_png(points: Sequence[ScatterPoint], path: str | Path) -> None:
    """Price vs threshold scatter: green dots have a 100 Mbps plan, dot
    size tracks collection data quality, and anything below the x = y
    line costs more than the block group's affordability threshold."""
    fig, ax = plt.subplots(figsize=(6.4, 6.4), dpi=100)
    try:
        if points:
            xs = [p.price_usd_month for p in points]
            ys = [p.threshold_usd_month for p in points]
            sizes = [(p.radius_frac * MAX_POINT_RADIUS_PX) ** 2 for p in points]
            colors = [p.color for p in points]
            ax.scatter(xs, ys, s=sizes, c=colors, alpha=0.75, edgecolors="none")
            top = max(max(xs), max(ys)) * 1.05
        else:
            top = 1.0
        ax.plot([0, top], [0, top], linestyle="--", linewidth=1, color="#888888")
        ax.set_xlim(0, top)
        ax.set_ylim(0, top)
        ax.set_xlabel("Representative plan price (USD/month)")
        ax.set_ylabel("Affordability threshold (USD/month)")
        ax.set_title("Plan price vs two percent of monthly income")
        fig.tight_layout()
        fig.savefig(path)
    finally:
        plt.close(fig)
