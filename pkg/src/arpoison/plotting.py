"""Figures written next to the text reports.

Only the object-oriented matplotlib API is used, so importing this module
never touches the global pyplot state or needs a display.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

# keep PNG bytes stable between runs
_PNG_META = {"Software": None}


def normalize_for_display(delta: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant array maps to 0.5."""
    delta = np.asarray(delta, dtype=np.float64)
    lo, hi = delta.min(), delta.max()
    if hi - lo <= 0:
        return np.full_like(delta, 0.5)
    return (delta - lo) / (hi - lo)


def _as_rgb(img):
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    return img


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    return path


def plot_confusion(confusion: np.ndarray, path, title: str = "") -> Path:
    confusion = np.asarray(confusion)
    k = confusion.shape[0]
    fig = Figure(figsize=(1.2 + 0.45 * k, 1.0 + 0.45 * k))
    ax = fig.add_subplot()
    rates = confusion / np.maximum(confusion.sum(axis=1, keepdims=True), 1)
    im = ax.imshow(rates, vmin=0, vmax=1, cmap="viridis")
    if k <= 20:
        for i in range(k):
            for j in range(k):
                if confusion[i, j]:
                    ax.text(j, i, str(confusion[i, j]), ha="center", va="center", fontsize=6,
                            color="black" if rates[i, j] > 0.5 else "white")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    fig.tight_layout()
    return _save(fig, path)


def plot_process_samples(samples, path, title: str = "") -> Path:
    """Grid of normalized planes; ``samples[k][s]`` is sample ``s`` of class ``k``."""
    rows = len(samples)
    cols = max(len(r) for r in samples)
    fig = Figure(figsize=(1.1 * cols, 1.1 * rows))
    for k, row in enumerate(samples):
        for s, plane in enumerate(row):
            ax = fig.add_subplot(rows, cols, k * cols + s + 1)
            ax.imshow(_as_rgb(normalize_for_display(plane)), cmap="gray", interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if s == 0:
                ax.set_ylabel(str(k), fontsize=7)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def plot_poison_grid(clean, deltas, poisoned, path, labels=None) -> Path:
    """Three rows: clean image, normalized perturbation, poisoned image."""
    n = len(poisoned)
    fig = Figure(figsize=(1.2 * max(n, 1), 3.8))
    names = ("clean", "perturbation", "poisoned")
    for r, imgs in enumerate((clean, deltas, poisoned)):
        for i in range(n):
            ax = fig.add_subplot(3, n, r * n + i + 1)
            if imgs is not None:
                img = normalize_for_display(imgs[i]) if r == 1 else np.clip(imgs[i], 0, 1)
                ax.imshow(_as_rgb(img), cmap="gray", interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_ylabel(names[r], fontsize=7)
            if r == 0 and labels is not None:
                ax.set_title(str(labels[i]), fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_norm_histogram(pre, post, path) -> Path:
    fig = Figure(figsize=(4.5, 3.0))
    ax = fig.add_subplot()
    pre = np.asarray(pre, dtype=np.float64)
    post = np.asarray(post, dtype=np.float64)
    pre, post = pre[np.isfinite(pre)], post[np.isfinite(post)]
    both = np.concatenate([pre, post])
    lo, hi = (both.min(), both.max()) if both.size else (0.0, 1.0)
    if hi - lo < 1e-6 * max(abs(hi), 1.0):
        lo, hi = lo - 0.5e-3 * max(abs(lo), 1.0), hi + 0.5e-3 * max(abs(hi), 1.0)
    bins = np.linspace(lo, hi, 41)
    if pre.size:
        ax.hist(pre, bins=bins, alpha=0.6, label="before clamp")
    if post.size:
        ax.hist(post, bins=bins, alpha=0.6, label="after clamp")
    ax.set_xlabel("perturbation norm")
    ax.set_ylabel("samples")
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    return _save(fig, path)
