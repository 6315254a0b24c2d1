"""Figures written next to the TSV reports.

Everything renders through the Agg canvas with an explicit Figure, so no
global pyplot state is touched and PNG bytes are reproducible (the
``Software`` metadata entry is dropped).
"""

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

PNG_METADATA = {"Software": None}


def _figure(width=8.0, height=None):
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    fig = Figure(figsize=(width, height or width * golden), facecolor="w")
    FigureCanvasAgg(fig)
    return fig


def save(fig, path):
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)


def plot_history(history, path):
    """Loss, closest-centroid accuracy, cluster radius and centroid drift per iteration."""
    fig = _figure(10, 7)
    axes = fig.subplots(2, 2, sharex=True)
    it = [r.iteration for r in history.records]
    axes[0, 0].plot(it, [r.mean_loss for r in history.records], "k-")
    axes[0, 0].set_ylabel("mean triplet loss")
    axes[0, 1].plot(it, [r.val_accuracy for r in history.records], "k-")
    axes[0, 1].set_ylabel("closest-centroid accuracy")
    axes[0, 1].set_ylim(0, 1.02)
    radius = np.array([r.radius for r in history.records])
    drift = np.array([r.drift for r in history.records])
    for c, name in enumerate(history.class_names):
        axes[1, 0].plot(it, radius[:, c], lw=0.8, label=name)
        axes[1, 1].plot(it, drift[:, c], lw=0.8)
    if len(history.class_names):
        axes[1, 0].plot(it, radius.mean(axis=1), "k-", lw=2, label="mean")
    axes[1, 0].set_ylabel("cluster radius")
    axes[1, 1].set_ylabel("centroid drift")
    for ax in axes[1]:
        ax.set_xlabel("iteration")
    if len(history.class_names) <= 12:
        axes[1, 0].legend(fontsize=6, ncol=2)
    fig.tight_layout()
    save(fig, path)


def plot_f1(report, path, title=None):
    fig = _figure(max(6.0, 0.35 * len(report.class_names) + 2), 4)
    ax = fig.subplots()
    x = np.arange(len(report.class_names))
    ax.bar(x, report.f1, color="0.3")
    ax.axhline(report.macro_f1, color="k", ls="--", lw=1, label=f"macro F1 {report.macro_f1:.3f}")
    ax.set_xticks(x)
    ax.set_xticklabels(report.class_names, rotation=60, ha="right", fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("F1")
    ax.legend(loc="lower right", fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    save(fig, path)


def plot_confusion(report, path):
    cm = np.asarray(report.confusion, dtype=np.float64)
    rows = cm.sum(axis=1, keepdims=True)
    rates = np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)
    n = len(report.class_names)
    fig = _figure(max(5.0, 0.3 * n + 3), max(4.5, 0.3 * n + 2.5))
    ax = fig.subplots()
    im = ax.imshow(rates, cmap="Greys", vmin=0, vmax=1)
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_xticklabels(report.class_names, rotation=60, ha="right", fontsize=7)
    ax.set_yticklabels(report.class_names, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, ax=ax, label="row share")
    fig.tight_layout()
    save(fig, path)


def plot_k_sweep(ks, macro_f1, path, centroid_f1=None):
    fig = _figure(6, 4)
    ax = fig.subplots()
    ax.plot(ks, macro_f1, "o-", color="0.4", label="kNN")
    if centroid_f1 is not None:
        ax.axhline(centroid_f1, color="k", lw=1, label="centroid")
    ax.set_xscale("log")
    ax.set_xticks(ks)
    ax.set_xticklabels([str(k) for k in ks])
    ax.set_xlabel("k")
    ax.set_ylabel("macro F1")
    ax.legend(fontsize=8)
    fig.tight_layout()
    save(fig, path)
