"""Delimited/JSON exports and the matplotlib figures rendered next to them."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricsReport  # noqa: E402

HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "test_acc")
ABLATION_COLUMNS = ("name", "acc", "precision", "recall", "f1")

# PNG metadata normally embeds the matplotlib version and a timestamp
_PNG_META = {"Software": None}


def fmt(x) -> str:
    """Six significant digits; integers stay integers."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    return f"{float(x):.6g}"


def _round(obj):
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(f"{float(obj):.6g}")
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_csv(rows, columns, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row[c]) for c in columns])
    return path


def write_json(doc, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_round(doc), indent=2) + "\n", encoding="utf-8")
    return path


def export_metrics(obj, path, fmt_name: str | None = None) -> Path:
    """Export a MetricsReport, a training history or an ablation table.

    Format follows ``fmt_name`` or the file suffix (``.csv`` / ``.json``).
    """
    fmt_name = fmt_name or Path(path).suffix.lstrip(".").lower()
    if fmt_name not in ("csv", "json"):
        raise ValueError(f"unsupported export format {fmt_name!r}")
    if isinstance(obj, MetricsReport):
        if fmt_name == "json":
            return write_json(obj.to_dict(), path)
        names = obj.class_names or [str(i) for i in range(len(obj.precision))]
        rows = [{"class": n, "precision": p, "recall": r, "f1": f}
                for n, p, r, f in zip(names, obj.precision, obj.recall, obj.f1)]
        return write_csv(rows, ("class", "precision", "recall", "f1"), path)
    rows = list(obj)
    columns = HISTORY_COLUMNS if rows and "epoch" in rows[0] else ABLATION_COLUMNS
    if fmt_name == "json":
        return write_json(rows, path)
    return write_csv(rows, columns, path)


def read_history(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# -- figures ------------------------------------------------------------------------

def _save(fig, path) -> Path:
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=_PNG_META)
    plt.close(fig)
    return Path(path)


def plot_history(history, path) -> Path:
    epochs = [r["epoch"] for r in history]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
    axes[0].plot(epochs, [r["train_loss"] for r in history], color="tab:red")
    axes[0].set_ylabel("train loss")
    axes[1].plot(epochs, [r["test_acc"] for r in history], color="tab:blue")
    axes[1].set_ylabel("test accuracy")
    axes[1].set_ylim(0, 1.02)
    axes[2].plot(epochs, [r["lr"] for r in history], color="tab:green")
    axes[2].set_ylabel("learning rate")
    for ax in axes:
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_confusion(report: MetricsReport, path) -> Path:
    cm = report.confusion
    k = cm.shape[0]
    names = report.class_names or [str(i) for i in range(k)]
    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * k, 0.8 + 0.6 * k))
    ax.imshow(cm, cmap="Blues")
    for i in range(k):
        for j in range(k):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center",
                    color="white" if cm[i, j] > cm.max() / 2 else "black", fontsize=8)
    ax.set_xticks(range(k), names, rotation=45, ha="right")
    ax.set_yticks(range(k), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(f"accuracy {report.accuracy:.4f}")
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(rows, path, title: str = "") -> Path:
    names = [r["name"] for r in rows]
    acc = [r["acc"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(rows)), 3.4))
    ax.bar(range(len(rows)), acc, color="tab:olive")
    ax.set_xticks(range(len(rows)), names, rotation=30, ha="right")
    ax.set_ylim(0, 1.02)
    ax.set_ylabel("test accuracy")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_heatmap(heatmap, image, path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(6, 3))
    axes[0].imshow(np.clip(np.asarray(image).transpose(1, 2, 0), 0, 1))
    axes[0].set_title("input")
    axes[1].imshow(np.clip(np.asarray(image).transpose(1, 2, 0), 0, 1))
    axes[1].imshow(heatmap.values, cmap="hot", alpha=0.5, vmin=0, vmax=1)
    axes[1].set_title(heatmap.source)
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, path)
