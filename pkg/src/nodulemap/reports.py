"""Run artifacts: JSON-lines records, key=value summaries and figures.

Figures render through the Agg backend so the package works on headless
machines; every writer takes an explicit path and creates parent
directories as needed.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .errors import FormatError  # noqa: E402


def _ensure_parent(path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)


def write_jsonl(path, rows) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="ascii") as fp:
        for row in rows:
            fp.write(json.dumps(row, sort_keys=True))
            fp.write("\n")


def read_jsonl(path):
    rows = []
    with open(path, "r", encoding="ascii") as fp:
        for line_no, line in enumerate(fp, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{line_no} is not valid JSON") from exc
    return rows


def format_value(value) -> str:
    if isinstance(value, float):
        return format(value, ".6g")
    return str(value)


def write_kv(path, mapping) -> None:
    """One key=value pair per line, floats at six significant digits."""
    _ensure_parent(path)
    with open(path, "w", encoding="ascii") as fp:
        for key, value in mapping.items():
            fp.write(f"{key}={format_value(value)}\n")


def _record_get(record, key):
    return record[key] if isinstance(record, dict) else getattr(record, key)


def training_curve_figure(records, path) -> None:
    """Loss and accuracy curves over epochs, train and test together."""
    _ensure_parent(path)
    epochs = [_record_get(r, "epoch") for r in records]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(epochs, [_record_get(r, "train_loss") for r in records], label="train")
    ax_loss.plot(epochs, [_record_get(r, "test_loss") for r in records], label="test")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("cross-entropy")
    ax_loss.legend()
    ax_acc.plot(epochs, [_record_get(r, "train_acc") for r in records], label="train")
    ax_acc.plot(epochs, [_record_get(r, "test_acc") for r in records], label="test")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0.0, 1.02)
    ax_acc.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ablation_bar_figure(rows, path, metric: str = "accuracy") -> None:
    """Mean bars with per-seed dots for each grid cell."""
    _ensure_parent(path)
    cells = []
    for row in rows:
        if row["cell"] not in cells:
            cells.append(row["cell"])
    means = []
    fig, ax = plt.subplots(figsize=(1.6 * max(4, len(cells)), 4))
    for i, cell in enumerate(cells):
        vals = [row[metric] for row in rows if row["cell"] == cell]
        means.append(float(np.mean(vals)))
        ax.scatter([i] * len(vals), vals, color="black", zorder=3, s=14)
    ax.bar(range(len(cells)), means, color="#6699cc", zorder=2)
    ax.set_xticks(range(len(cells)))
    ax.set_xticklabels(cells, rotation=20, ha="right")
    ax.set_ylabel(metric)
    ax.set_ylim(0.0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def composite_figure(panel: np.ndarray, path, title: str = "") -> None:
    """Grayscale rendering of an input/map composite panel."""
    _ensure_parent(path)
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.imshow(panel, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
