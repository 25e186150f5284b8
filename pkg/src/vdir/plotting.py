"""Matplotlib figures written next to the JSON/CSV reports."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def read_log(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def plot_loss_curves(records: Sequence[dict] | str | Path, path,
                     terms=("denoise", "kl", "recon_pix", "adv_g", "adv_d", "est")) -> Path:
    if isinstance(records, (str, Path)):
        records = read_log(records)
    iters = np.array([r["iter"] for r in records])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 3, figsize=(9, 5), sharex=True)
        for ax, term in zip(axes.flat, terms):
            vals = np.array([r.get(term, np.nan) for r in records], dtype=float)
            ax.plot(iters, vals, lw=0.6, color="0.6")
            if len(vals) >= 20:
                k = max(len(vals) // 50, 5)
                smooth = np.convolve(vals, np.ones(k) / k, mode="valid")
                ax.plot(iters[k - 1:], smooth, lw=1.2, color="C0")
            ax.set_title(term)
            ax.set_xlabel("iteration")
        return _save(fig, path)


def plot_heatmaps(heatmaps: Mapping[str, np.ndarray], path, shared_scale: bool = True) -> Path:
    items = list(heatmaps.items())
    vmin = min(float(h.min()) for _, h in items) if shared_scale else None
    vmax = max(float(h.max()) for _, h in items) if shared_scale else None
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(items), figsize=(2.6 * len(items), 2.6), squeeze=False)
        for ax, (label, h) in zip(axes[0], items):
            im = ax.imshow(h, cmap="viridis", vmin=vmin, vmax=vmax)
            ax.set_title(label)
            ax.axis("off")
        fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path)
        plt.close(fig)
        return path


def plot_embedding_pca(x: np.ndarray, labels: Sequence[str], path) -> Path:
    from .latent import pca_2d

    proj, _, _ = pca_2d(x)
    labels = np.asarray(labels)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 4))
        try:
            values = labels.astype(float)
            sc = ax.scatter(proj[:, 0], proj[:, 1], c=values, s=6, cmap="plasma")
            fig.colorbar(sc, ax=ax, label="label")
        except ValueError:
            for lab in np.unique(labels):
                m = labels == lab
                ax.scatter(proj[m, 0], proj[m, 1], s=6, label=lab)
            ax.legend(markerscale=2, frameon=False)
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        return _save(fig, path)


def plot_eval_report(report: dict, path) -> Path:
    rows = report["images"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 0.3 * len(rows)), 3))
        ax.bar(range(len(rows)), [r["psnr_db"] for r in rows], color="C0")
        ax.axhline(report["mean_psnr"], color="k", lw=0.8, ls="--", label=f"mean {report['mean_psnr']:.2f} dB")
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels([r["id"] for r in rows], rotation=90, fontsize=6)
        ax.set_ylabel("PSNR (dB)")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_probe_panel(images: Mapping[str, np.ndarray], path) -> Path:
    items = list(images.items())
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(items), figsize=(2.6 * len(items), 2.8), squeeze=False)
        for ax, (label, img) in zip(axes[0], items):
            ax.imshow(np.clip(img, 0, 1), cmap="gray" if img.ndim == 2 else None)
            ax.set_title(label)
            ax.axis("off")
        return _save(fig, path)
