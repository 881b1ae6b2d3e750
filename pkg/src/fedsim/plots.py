"""Figure rendering for the report path. Files only, no interactive backend."""

import os
from collections import defaultdict

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt


def render_metric_figure(rows, metric, out_png, title=None):
    """Line plot of metric vs round, one line per run label.

    ``rows`` are tidy records (run_label, round, metric, value) as produced
    by emit_plot_data.
    """
    series = defaultdict(list)
    for label, rnd, m, value in rows:
        if m == metric:
            series[label].append((int(rnd), float(value)))
    fig, ax = plt.subplots(figsize=(6, 4))
    for label in sorted(series):
        pts = sorted(series[label])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=label, lw=1.5)
    ax.set_xlabel("communication round")
    ax.set_ylabel(metric.replace("_", " "))
    if title:
        ax.set_title(title)
    if series:
        ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return out_png


def render_partition_figure(shards, num_classes, out_png):
    """Heatmap of per-client label counts."""
    import numpy as np

    mat = np.stack([s.label_hist for s in shards])
    fig, ax = plt.subplots(figsize=(6, 3 + 0.2 * len(shards)))
    im = ax.imshow(mat, aspect="auto", cmap="viridis")
    ax.set_xlabel("class")
    ax.set_ylabel("client")
    ax.set_xticks(range(num_classes))
    ax.set_yticks(range(len(shards)))
    fig.colorbar(im, ax=ax, label="samples")
    ax.set_title("per-client label histogram")
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return out_png


def render_plot_csv(csv_path, out_png=None):
    """Render the figure companion to a tidy plot-data CSV."""
    import csv as _csv

    with open(csv_path, newline="") as f:
        reader = _csv.reader(f)
        header = next(reader)
        rows = [r for r in reader]
    if out_png is None:
        out_png = os.path.splitext(csv_path)[0] + ".png"
    metrics = sorted({r[2] for r in rows})
    numeric = [r for r in rows if r[2] not in ("has_feature_skew",)]
    if not numeric:
        return None
    metric = numeric[0][2] if len(metrics) == 1 else None
    if metric is None:
        # mixed-metric table (ks_report): bar chart of the numeric entries
        fig, ax = plt.subplots(figsize=(5, 3.5))
        names = [r[2] for r in numeric]
        values = [float(r[3]) for r in numeric]
        ax.bar(range(len(names)), values, color="steelblue")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
        ax.set_title("heterogeneity report")
        fig.tight_layout()
        fig.savefig(out_png, dpi=150)
        plt.close(fig)
        return out_png
    return render_metric_figure(numeric, metric, out_png)
