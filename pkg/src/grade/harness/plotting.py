"""Report figures, written next to the CSV they visualize."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

NDCG_COLS = ("ndcg_ctr", "ndcg_cvr", "ndcg_opm", "ndcg_gpm")


def _floats(rows, key):
    return np.array([float(r[key]) if r.get(key) not in (None, "") else np.nan for r in rows])


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_pretrain(rows: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(_floats(rows, "iteration"), _floats(rows, "loss"), lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("LambdaLoss (batch mean)")
    ax.set_title("Stage 1 pretraining")
    _save(fig, path)


def plot_train(rows: list[dict], path) -> None:
    it = _floats(rows, "iteration")
    fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
    panels = [
        ("mean_reward", "mean group reward"),
        ("mean_kl", "KL to reference"),
        ("clip_fraction", "clip fraction"),
        ("hat_alpha", "concentration"),
    ]
    for ax, (key, label) in zip(axes.ravel(), panels):
        ax.plot(it, _floats(rows, key), lw=1)
        ax.set_ylabel(label)
    for ax in axes[1]:
        ax.set_xlabel("iteration")
    fig.suptitle("Stage 2 GRPO fine-tuning")
    _save(fig, path)


def plot_eval(rows: list[dict], path, columns=NDCG_COLS + ("post", "total")) -> None:
    names = [r["method"] for r in rows]
    x = np.arange(len(columns))
    width = 0.8 / max(len(rows), 1)
    fig, ax = plt.subplots(figsize=(9, 4))
    for i, r in enumerate(rows):
        ax.bar(x + i * width, [float(r[c]) for c in columns], width, label=names[i])
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(columns)
    ax.set_ylabel("held-out mean")
    ax.legend(fontsize=8, ncol=min(len(rows), 5))
    _save(fig, path)


def plot_ablation(rows: list[dict], path) -> None:
    names = [r["run"] for r in rows]
    cols = ("ndcg_ctr", "ndcg_cvr", "ndcg_opm", "ndcg_gpm", "total")
    fig, axes = plt.subplots(1, len(cols), figsize=(3 * len(cols), 3.5))
    for ax, c in zip(axes, cols):
        vals = [float(r[c]) for r in rows]
        ax.barh(np.arange(len(rows)), vals)
        lo, hi = min(vals), max(vals)
        pad = (hi - lo) * 0.2 or 0.01
        ax.set_xlim(lo - pad, hi + pad)
        ax.set_yticks(np.arange(len(rows)))
        ax.set_yticklabels(names if c == cols[0] else [])
        ax.set_title(c)
    _save(fig, path)
