"""Figures written next to the CSV/JSON outputs."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .seg import PALETTE

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _to_hwc(x):
    x = np.asarray(x.detach().cpu().numpy() if hasattr(x, "detach") else x, dtype=np.float32)
    if x.ndim == 3 and x.shape[0] in (1, 3) and x.shape[-1] not in (1, 3):
        x = x.transpose(1, 2, 0)
    if x.ndim == 3 and x.shape[-1] == 1:
        x = x[..., 0]
    return np.clip(x, 0, 1)


def colorize(labels):
    return PALETTE[np.asarray(labels)] / 255.0


def image_grid(rows, titles, path, scale=1.6):
    """``rows`` is a list of equal-length lists of images (HWC/CHW/HW)."""
    n_r, n_c = len(rows), len(titles)
    with plt.rc_context(STYLE | {"axes.grid": False}):
        fig, axes = plt.subplots(n_r, n_c, figsize=(scale * n_c, scale * 1.3 * n_r), squeeze=False)
        for r, row in enumerate(rows):
            for c, img in enumerate(row):
                ax = axes[r][c]
                arr = _to_hwc(img)
                ax.imshow(arr, cmap="gray" if arr.ndim == 2 else None, vmin=0, vmax=1, interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
                if r == 0:
                    ax.set_title(titles[c], fontsize=8)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def warp_visualization(product, coarse, fine, gt, path):
    """Product / coarse / fine / ground-truth warps, one row per sample."""
    rows = [[p, c, f, g] for p, c, f, g in zip(product, coarse, fine, gt)]
    return image_grid(rows, ["product", "coarse warp", "fine warp", "ground truth"], path)


def tryon_visualization(results, cloth, model, path, max_rows=8):
    rows = []
    for i in range(min(len(model), max_rows)):
        rows.append([cloth[i], results["fine"][i], colorize(results["exp_mask"][i].numpy()),
                     results["comp_mask"][i], results["tryon"][i], model[i]])
    return image_grid(rows, ["cloth", "warped", "expected mask", "comp. mask", "try-on", "target"], path)


def read_log(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    cols = {}
    for row in rows:
        for k, v in row.items():
            cols.setdefault(k, []).append(float(v) if v not in ("", None) else np.nan)
    return {k: np.asarray(v) for k, v in cols.items()}


def loss_curves(log_path, path, columns=None, title=None):
    data = read_log(log_path)
    columns = columns or [c for c in data if c.startswith("L_")]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for c in columns:
            if c in data and np.any(np.isfinite(data[c])):
                ax.plot(data["step"], data[c], label=c, lw=1)
        if "snapshot" in data:
            for s in data["step"][data["snapshot"] == 1]:
                ax.axvline(s, color="k", lw=0.5, alpha=0.3)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.set_title(title or Path(log_path).stem)
        ax.legend(fontsize=7, frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def ablation_bars(reports, path, metric="ssim"):
    labels = list(reports)
    vals = [getattr(reports[k], metric) for k in labels]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        bars = ax.bar(range(len(vals)), vals, color=["#bbbbbb", "#8fa8c8", "#5b82b5", "#1f4e8c"][:len(vals)])
        ax.set_xticks(range(len(vals)))
        ax.set_xticklabels(labels, fontsize=8)
        ax.set_ylabel(metric.upper().replace("_", "-"))
        lo = min(vals)
        ax.set_ylim(max(0.0, lo - 0.1 * (1 - lo) - 0.02), min(1.0, max(vals) + 0.02))
        for b, v in zip(bars, vals):
            ax.text(b.get_x() + b.get_width() / 2, v, f"{v:.3f}", ha="center", va="bottom", fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def save_png(img, path):
    arr = np.clip(np.round(_to_hwc(img) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
    return Path(path)
