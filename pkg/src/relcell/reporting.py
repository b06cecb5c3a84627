"""Report files and figures.

Every run directory gets the same trio: line-delimited JSON records for
machines, a tab-separated table plus an aligned text table for people,
and PNG figures rendered next to them. Writers are pure functions of
their inputs so reruns with the same seed reproduce the files byte for
byte (training logs are the one exception: they carry wall-clock
times).
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


# ------------------------------------------------------------- records

def write_jsonl(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if v is None:
        return ""
    return str(v)


def write_delimited(path, rows: list[dict], columns=None) -> None:
    """Tab-separated table; column order from `columns` or first row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(columns) + "\n")
        for row in rows:
            f.write("\t".join(_cell(row.get(c)) for c in columns) + "\n")


def format_table(rows: list[dict], columns=None) -> str:
    """Aligned text table for terminal output."""
    if columns is None:
        columns = list(rows[0]) if rows else []
    grid = [columns] + [[_cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(g[i]) for g in grid) for i in range(len(columns))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(g, widths)).rstrip()
             for g in grid]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# -------------------------------------------------------------- figures

def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """ROC polyline (fpr, tpr), threshold swept from high to low."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    order = np.argsort(-s, kind="stable")
    y = y[order]
    tp = np.concatenate([[0], np.cumsum(y)])
    fp = np.concatenate([[0], np.cumsum(~y)])
    return fp / max(fp[-1], 1), tp / max(tp[-1], 1)


def render_roc(scores, labels, path) -> Path:
    fpr, tpr = roc_points(scores, labels)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot(fpr, tpr, lw=1.8)
    ax.plot([0, 1], [0, 1], ls="--", c="gray", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("ROC")
    return _save(fig, path)


def render_score_histogram(scores, labels, path) -> Path:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    bins = np.linspace(s.min(), s.max() + 1e-9, 30)
    ax.hist(s[y == 0], bins=bins, alpha=0.6, label="label 0")
    ax.hist(s[y == 1], bins=bins, alpha=0.6, label="label 1")
    ax.set_xlabel("score")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def render_pred_scatter(preds, targets, path) -> Path:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(t, p, s=8, alpha=0.6)
    lo, hi = min(t.min(), p.min()), max(t.max(), p.max())
    ax.plot([lo, hi], [lo, hi], ls="--", c="gray", lw=0.8)
    ax.set_xlabel("target")
    ax.set_ylabel("prediction")
    fig.tight_layout()
    return _save(fig, path)


def render_loss_curve(log: list[dict], path) -> Path:
    steps = [r["step"] for r in log]
    losses = [r["loss"] for r in log]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(steps, [r["lr"] for r in log], c="tab:orange", lw=0.8, alpha=0.7)
    ax2.set_ylabel("lr", color="tab:orange")
    fig.tight_layout()
    return _save(fig, path)


def render_metric_bars(rows: list[dict], path, value_key="value",
                       label_key="variant") -> Path:
    fig, ax = plt.subplots(figsize=(max(4.0, 1.3 * len(rows)), 3.5))
    names = [str(r[label_key]) for r in rows]
    vals = [float(r[value_key]) for r in rows]
    ax.bar(range(len(rows)), vals)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel(rows[0].get("metric", value_key) if rows else value_key)
    fig.tight_layout()
    return _save(fig, path)
