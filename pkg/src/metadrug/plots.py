"""Static figures rendered from saved JSON results.

PNG metadata is pinned (no software/version tag) so that re-rendering the
same JSON gives the same bytes under a fixed matplotlib version.
"""

from __future__ import annotations

import json

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

METRICS = (("jaccard", "Jaccard"), ("f1", "F1"), ("prauc", "PRAUC"), ("ddi", "DDI rate"))
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)


def _read(source):
    if isinstance(source, (list, dict)):
        return source
    with open(source) as fh:
        return json.load(fh)


def plot_cold_start(source, path):
    """One panel per metric, percentile on the x-axis.

    ``source`` is a JSON path or the loaded value: either a list of metric
    rows (single method) or a dict mapping method name to such a list.
    """
    data = _read(source)
    series = data if isinstance(data, dict) else {"": data}
    fig, axes = plt.subplots(1, 4, figsize=(14, 3.2))
    for ax, (key, title) in zip(axes, METRICS):
        for name, rows in series.items():
            xs = [float(r["subset_label"].lstrip("p")) for r in rows]
            ax.plot(xs, [r[key] for r in rows], marker="o", label=name or None)
        ax.set_title(title)
        ax.set_xlabel("code-count percentile")
        ax.grid(alpha=0.3)
    if len(series) > 1:
        axes[0].legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def plot_ablation(source, path):
    """Grouped bars: one group per metric, one bar per ablation row."""
    rows = _read(source)
    if isinstance(rows, dict):
        rows = rows["mean"]
    fig, axes = plt.subplots(1, 4, figsize=(14, 3.4))
    labels = [r["subset_label"] for r in rows]
    for ax, (key, title) in zip(axes, METRICS):
        ax.bar(range(len(rows)), [r[key] for r in rows], color="tab:blue")
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(labels, rotation=35, ha="right", fontsize=7)
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
