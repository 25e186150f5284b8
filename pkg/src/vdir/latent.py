"""Probes of the learned latent: mismatched conditioning, heatmaps and pooled embeddings."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import add_awgn, save_image
from .evaluator import denoise_with_latent, encode_image, psnr


@dataclass
class LatentProbeResult:
    x_hat: np.ndarray
    psnr_db: Optional[float]
    descriptor: dict = field(default_factory=dict)


@dataclass
class Embedding:
    vector: np.ndarray
    label: str = ""


def denoise_with_override(model, y_den: np.ndarray, y_enc: np.ndarray, clean: Optional[np.ndarray] = None,
                          descriptor: Optional[dict] = None) -> LatentProbeResult:
    """Denoise ``y_den`` with the mean latent extracted from ``y_enc``."""
    if y_den.shape[:2] != y_enc.shape[:2]:
        raise ValueError(f"denoiser input {y_den.shape[:2]} and encoder input {y_enc.shape[:2]} differ in size")
    code = encode_image(model, y_enc)
    x_hat = np.clip(denoise_with_latent(model, y_den, code.mu), 0.0, 1.0)
    score = psnr(x_hat, clean) if clean is not None else None
    return LatentProbeResult(x_hat=x_hat, psnr_db=score, descriptor=dict(descriptor or {}))


def latent_channel_mean(c) -> np.ndarray:
    """Per-pixel mean over latent channels of one sample: ``(1, C, h, w)`` or ``(C, h, w)`` -> ``(h, w)``."""
    c = c.detach().cpu().numpy() if torch.is_tensor(c) else np.asarray(c)
    if c.ndim == 4:
        if c.shape[0] != 1:
            raise ValueError("latent_channel_mean expects a single sample")
        c = c[0]
    return c.mean(axis=0)


def flat_patch_probe(model, intensity: float, sigma: float, size: int, rng: np.random.Generator,
                     channels: int = 3) -> np.ndarray:
    if not 0.0 <= intensity <= 1.0:
        raise ValueError("intensity must be in [0, 1]")
    flat = np.full((size, size, channels), intensity, dtype=np.float32)
    noisy = add_awgn(flat, sigma, rng).noisy
    return latent_channel_mean(encode_image(model, noisy).mu)


def pooled_embedding(model, patch: np.ndarray, label: str = "") -> Embedding:
    mu = encode_image(model, patch).mu
    return Embedding(vector=mu.mean(dim=(0, 2, 3)).numpy().astype(np.float64), label=str(label))


def export_embeddings(rows: Sequence[Embedding], path, plot_path=None) -> Path:
    if not rows:
        raise ValueError("no embeddings to export")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = len(rows[0].vector)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"c{i + 1}" for i in range(dim)] + ["label"])
        for r in rows:
            w.writerow([repr(float(v)) for v in r.vector] + [r.label])
    if plot_path is not None:
        from .plotting import plot_embedding_pca
        plot_embedding_pca(np.stack([r.vector for r in rows]), [r.label for r in rows], plot_path)
    return path


def read_embeddings(path) -> list[Embedding]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        dim = len(header) - 1
        return [Embedding(vector=np.array([float(v) for v in row[:dim]]), label=row[dim]) for row in reader]


def pca_2d(x: np.ndarray):
    """Project rows of ``x`` onto their top two principal axes; returns ``(proj, components, mean)``."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - mean, full_matrices=False)
    comps = vt[:2]
    return (x - mean) @ comps.T, comps, mean


def fit_linear_probe(x: np.ndarray, target: np.ndarray):
    """Least-squares affine fit ``target ~ x @ w + b``; returns ``(coef, predict)``."""
    x = np.asarray(x, dtype=np.float64)
    design = np.hstack([x, np.ones((len(x), 1))])
    coef, *_ = np.linalg.lstsq(design, np.asarray(target, dtype=np.float64), rcond=None)

    def predict(z):
        z = np.asarray(z, dtype=np.float64)
        return np.hstack([z, np.ones((len(z), 1))]) @ coef

    return coef, predict


def write_heatmap(path, heatmap: np.ndarray) -> Path:
    """Normalized grayscale PNG plus a JSON sidecar with the raw min/max."""
    path = Path(path)
    lo, hi = float(heatmap.min()), float(heatmap.max())
    norm = (heatmap - lo) / (hi - lo) if hi > lo else np.zeros_like(heatmap)
    save_image(path, norm[..., None])
    path.with_suffix(".json").write_text(json.dumps({"min": lo, "max": hi, "shape": list(heatmap.shape)}))
    return path
