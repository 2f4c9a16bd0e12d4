"""Matplotlib figures for experiment bundles.

Every figure is written as SVG together with a CSV of exactly the points
drawn, so plots can be recomputed from the CSV alone.
"""

from __future__ import annotations

import csv
import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FONT_SIZE = 8
STYLE = {
    "font.size": FONT_SIZE,
    "axes.labelsize": FONT_SIZE,
    "axes.titlesize": FONT_SIZE + 1,
    "legend.fontsize": FONT_SIZE - 1,
    "xtick.labelsize": FONT_SIZE - 1,
    "ytick.labelsize": FONT_SIZE - 1,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
    "svg.fonttype": "none",
    "svg.hashsalt": "peftlab",
    "figure.figsize": (4.5, 3.2),
}
MARKERS = {"full": "s", "lora": "o", "ia3": "^"}


def _figure():
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
    return fig, ax


def _save(fig, ax, svg_path, points: list[dict], columns: list[str]):
    with plt.rc_context(STYLE):
        if ax.get_legend_handles_labels()[0]:
            ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(svg_path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    csv_path = os.path.splitext(svg_path)[0] + ".csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(points)
    return svg_path, csv_path


def params_vs_performance(rows, metric_label, svg_path):
    """Trainable parameters (log x) against the peak metric, one marker per mode."""
    fig, ax = _figure()
    points = []
    for mode in sorted({r["mode"] for r in rows}):
        sel = [r for r in rows if r["mode"] == mode]
        xs = [float(r["P"]) for r in sel]
        ys = [float(r["peak_metric"]) for r in sel]
        ax.scatter(xs, ys, marker=MARKERS.get(mode, "o"), label=mode)
        points += [{"label": r["cell_id"], "mode": mode, "tier": r.get("tier", ""), "x": x, "y": y} for r, x, y in zip(sel, xs, ys)]
    ax.set_xscale("log")
    ax.set_xlabel("trainable parameters")
    ax.set_ylabel(metric_label)
    return _save(fig, ax, svg_path, points, ["label", "mode", "tier", "x", "y"])


def budget_curves(rows, metric_label, svg_path):
    """Median-over-seeds peak metric against budget, one line per (tier, mode)."""
    fig, ax = _figure()
    groups = defaultdict(lambda: defaultdict(list))
    kinds = {r["budget_kind"] for r in rows}
    for r in rows:
        groups[(r.get("tier", ""), r["mode"])][float(r["budget"])].append(float(r["peak_metric"]))
    points = []
    for (tier, mode), by_budget in sorted(groups.items()):
        xs = sorted(by_budget)
        ys = [float(np.median(by_budget[x])) for x in xs]
        label = f"{tier} {mode}".strip()
        ax.plot(xs, ys, marker=MARKERS.get(mode, "o"), linestyle="-" if mode == "lora" else ":", label=label)
        points += [{"label": label, "tier": tier, "mode": mode, "x": x, "y": y} for x, y in zip(xs, ys)]
    kind = kinds.pop() if len(kinds) == 1 else "budget"
    if kind == "samples_per_class":
        ax.set_xscale("log", base=2)
    ax.set_xlabel({"time_seconds": "time budget (s)", "samples_per_class": "samples per class", "epochs": "epochs"}.get(kind, kind))
    ax.set_ylabel(f"{metric_label} (median over seeds)")
    return _save(fig, ax, svg_path, points, ["label", "tier", "mode", "x", "y"])


def efficiency_scatter(labels, efficiency, performance, modes, metric_label, svg_path):
    """Holistic efficiency (x) against performance (y)."""
    fig, ax = _figure()
    points = []
    for mode in sorted(set(modes)):
        idx = [i for i, m in enumerate(modes) if m == mode]
        ax.scatter([efficiency[i] for i in idx], [performance[i] for i in idx], marker=MARKERS.get(mode, "o"), label=mode)
    for lab, x, y, m in zip(labels, efficiency, performance, modes):
        points.append({"label": lab, "mode": m, "x": x, "y": y})
    ax.set_xlim(-0.05, 1.05)
    ax.set_xlabel("efficiency (1 = most efficient, min-max over cohort)")
    ax.set_ylabel(metric_label)
    return _save(fig, ax, svg_path, points, ["label", "mode", "x", "y"])


def rank_deltas(ranks, deltas, metric_label, svg_path, series="lora"):
    """Best score at each rank minus best score at r=8."""
    fig, ax = _figure()
    ax.axhline(0.0, color="0.6", linewidth=0.8)
    ax.plot(ranks, deltas, marker="o", label=series)
    ax.set_xscale("log", base=2)
    ax.set_xticks(ranks)
    ax.set_xticklabels([str(r) for r in ranks])
    ax.set_xlabel("LoRA rank")
    ax.set_ylabel(f"{metric_label} difference vs r=8")
    points = [{"label": series, "x": r, "y": d} for r, d in zip(ranks, deltas)]
    return _save(fig, ax, svg_path, points, ["label", "x", "y"])
