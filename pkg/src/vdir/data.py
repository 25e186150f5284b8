"""Patch extraction, dihedral augmentation and noise synthesis.

Images are float arrays in [0, 1] laid out as ``(H, W, C)`` or
``(N, H, W, C)``. Noise levels for AWGN are given in 0-255 units and scaled
by 1/255 internally.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

AWGN = "awgn"
HETEROSCEDASTIC = "heteroscedastic"

# (k rot90, flip) pairs; index 0 is the identity.
DIHEDRAL = [(k, flip) for flip in (False, True) for k in range(4)]


class PatchTooLarge(ValueError):
    pass


class NonSquareRotation(ValueError):
    pass


@dataclass
class CrfParams:
    gamma: float = 2.2

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")


@dataclass
class NoiseSpec:
    kind: str = AWGN
    sigma_range: tuple[float, float] = (5.0, 70.0)
    sigma_s_range: tuple[float, float] = (0.0, 0.06)
    sigma_c_range: tuple[float, float] = (0.0, 0.03)
    gamma_range: tuple[float, float] = (1.5, 3.0)
    crf: Optional[CrfParams] = None
    clip_output: bool = False

    def __post_init__(self):
        if self.kind not in (AWGN, HETEROSCEDASTIC):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        self.sigma_range = tuple(float(v) for v in self.sigma_range)
        self.sigma_s_range = tuple(float(v) for v in self.sigma_s_range)
        self.sigma_c_range = tuple(float(v) for v in self.sigma_c_range)
        self.gamma_range = tuple(float(v) for v in self.gamma_range)
        lo, hi = self.sigma_range
        if not 0 <= lo <= hi <= 255:
            raise ValueError(f"sigma_range must satisfy 0 <= lo <= hi <= 255, got {self.sigma_range}")
        for name in ("sigma_s_range", "sigma_c_range", "gamma_range"):
            a, b = getattr(self, name)
            if a < 0 or b < a:
                raise ValueError(f"{name} must be a non-negative interval, got {(a, b)}")
        if isinstance(self.crf, dict):
            self.crf = CrfParams(**self.crf)

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "sigma_range": list(self.sigma_range),
            "sigma_s_range": list(self.sigma_s_range),
            "sigma_c_range": list(self.sigma_c_range),
            "gamma_range": list(self.gamma_range),
            "clip_output": self.clip_output,
        }
        d["crf"] = None if self.crf is None else {"gamma": self.crf.gamma}
        return d


@dataclass
class NoisySample:
    clean: np.ndarray
    noisy: np.ndarray
    sigma: Optional[np.ndarray] = None  # per-image sigma, 0-255 units; AWGN only
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.clean.shape != self.noisy.shape:
            raise ValueError(f"clean {self.clean.shape} and noisy {self.noisy.shape} differ in shape")


def extract_patch(image: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Crop a ``size`` x ``size`` patch at a uniformly random offset."""
    h, w = image.shape[:2]
    if h < size or w < size:
        raise PatchTooLarge(f"PatchTooLarge: patch {size} does not fit image {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return image[top:top + size, left:left + size]


def dihedral(img: np.ndarray, index: int) -> np.ndarray:
    """Apply dihedral transform ``index`` (0..7) to the two leading spatial axes."""
    k, flip = DIHEDRAL[index]
    out = np.flip(img, axis=1) if flip else img
    return np.rot90(out, k, axes=(0, 1))


def inverse_dihedral(img: np.ndarray, index: int) -> np.ndarray:
    k, flip = DIHEDRAL[index]
    out = np.rot90(img, -k, axes=(0, 1))
    return np.flip(out, axis=1) if flip else out


def augment(patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if patch.shape[0] != patch.shape[1]:
        raise NonSquareRotation(f"NonSquareRotation: augment needs a square patch, got {patch.shape[:2]}")
    return np.ascontiguousarray(dihedral(patch, int(rng.integers(0, 8))))


def sample_sigma(spec: NoiseSpec, rng: np.random.Generator) -> float:
    if spec.kind != AWGN:
        raise ValueError("sample_sigma requires an AWGN noise spec")
    lo, hi = spec.sigma_range
    return float(rng.uniform(lo, hi)) if hi > lo else lo


def add_awgn(clean: np.ndarray, sigma, rng: np.random.Generator, clip: bool = False) -> NoisySample:
    """Add iid Gaussian noise with std ``sigma/255``.

    ``sigma`` is a scalar or, for a batch ``(N, H, W, C)``, one value per image.
    """
    clean = np.asarray(clean, dtype=np.float32)
    sig = np.asarray(sigma, dtype=np.float64)
    if np.any(sig < 0):
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sig.ndim == 0:
        scale = sig / 255.0
    else:
        scale = (sig / 255.0).reshape((-1,) + (1,) * (clean.ndim - 1))
    noise = rng.standard_normal(clean.shape) * scale
    noisy = (clean + noise).astype(np.float32)
    if clip:
        noisy = np.clip(noisy, 0.0, 1.0)
    sig_arr = np.atleast_1d(sig).astype(np.float32)
    return NoisySample(clean=clean, noisy=noisy, sigma=sig_arr)


def _uniform(rng, lo_hi):
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def heteroscedastic_noise(clean, sigma_s, sigma_c, gamma, rng):
    """Return ``(noisy, linear, noisy_linear)``; ``noisy_linear`` is before clipping."""
    # linear irradiance through the inverse gamma CRF
    linear = np.power(np.clip(clean, 0.0, 1.0).astype(np.float64), gamma)
    std = np.sqrt(sigma_s * linear + sigma_c ** 2)
    noisy_linear = linear + rng.standard_normal(clean.shape) * std
    noisy = np.power(np.clip(noisy_linear, 0.0, 1.0), 1.0 / gamma)
    return noisy.astype(np.float32), linear, noisy_linear


def synthesize_heteroscedastic(clean: np.ndarray, spec: NoiseSpec, rng: np.random.Generator) -> NoisySample:
    """Signal-dependent noise in the linear domain of a gamma-law camera curve.

    Parameters are drawn once per image (the leading axis when ``clean`` is a batch).
    """
    if spec.kind != HETEROSCEDASTIC:
        raise ValueError("synthesize_heteroscedastic requires a heteroscedastic noise spec")
    clean = np.asarray(clean, dtype=np.float32)
    batch = clean if clean.ndim == 4 else clean[None]
    out, params = [], []
    for img in batch:
        s = _uniform(rng, spec.sigma_s_range)
        c = _uniform(rng, spec.sigma_c_range)
        g = spec.crf.gamma if spec.crf is not None else _uniform(rng, spec.gamma_range)
        noisy, _, _ = heteroscedastic_noise(img, s, c, g, rng)
        out.append(noisy)
        params.append({"sigma_s": s, "sigma_c": c, "gamma": g})
    noisy = np.stack(out)
    if clean.ndim == 3:
        noisy = noisy[0]
    return NoisySample(clean=clean, noisy=noisy, sigma=None, params={"images": params})


def synthesize(clean: np.ndarray, spec: NoiseSpec, rng: np.random.Generator) -> NoisySample:
    if spec.kind == AWGN:
        n = clean.shape[0] if clean.ndim == 4 else None
        sig = [sample_sigma(spec, rng) for _ in range(n)] if n else sample_sigma(spec, rng)
        return add_awgn(clean, sig, rng, clip=spec.clip_output)
    return synthesize_heteroscedastic(clean, spec, rng)


def pad_to_multiple(img: np.ndarray, multiple: int = 4) -> np.ndarray:
    h, w = img.shape[:2]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return img
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (img.ndim - 2)
    return np.pad(img, pad, mode="reflect" if min(h, w) > max(ph, pw) else "symmetric")


# --- image I/O -------------------------------------------------------------

def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        return np.asarray(im, dtype=np.float32) / 255.0


def save_image(path, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def list_images(root) -> list[Path]:
    root = Path(root)
    if root.is_file():
        return [root]
    return sorted(p for p in root.rglob("*") if p.suffix.lower() == ".png")


def read_manifest(path, split: Optional[str] = None) -> list[Path]:
    """Read a JSON manifest: a list of paths or ``{"path": ..., "split": ...}`` records."""
    path = Path(path)
    entries = json.loads(path.read_text())
    if isinstance(entries, dict):
        entries = entries.get("images", [])
    out = []
    for e in entries:
        if isinstance(e, str):
            e = {"path": e}
        if split is not None and e.get("split") not in (None, split):
            continue
        p = Path(e["path"])
        out.append(p if p.is_absolute() else path.parent / p)
    return out


def load_dataset(source, split: Optional[str] = None) -> list[np.ndarray]:
    source = Path(source)
    if source.suffix.lower() == ".json":
        paths = read_manifest(source, split)
    else:
        paths = list_images(source)
    return [load_image(p) for p in paths]


class PatchSampler:
    """Draws augmented clean patches and synthesizes their noisy pairs.

    Images are sampled uniformly with replacement; noise parameters are drawn
    per patch.
    """

    def __init__(self, images: Sequence[np.ndarray], patch_size: int, batch_size: int,
                 noise_spec: NoiseSpec, rng: np.random.Generator, augment_patches: bool = True):
        if not images:
            raise ValueError("dataset is empty")
        self.images = [img for img in images if min(img.shape[:2]) >= patch_size]
        if not self.images:
            raise PatchTooLarge(f"PatchTooLarge: no image is at least {patch_size}x{patch_size}")
        self.patch_size = patch_size
        self.batch_size = batch_size
        self.noise_spec = noise_spec
        self.rng = rng
        self.augment_patches = augment_patches

    def next_batch(self) -> NoisySample:
        patches = []
        for _ in range(self.batch_size):
            img = self.images[int(self.rng.integers(0, len(self.images)))]
            p = extract_patch(img, self.patch_size, self.rng)
            if self.augment_patches:
                p = augment(p, self.rng)
            patches.append(p)
        return synthesize(np.stack(patches).astype(np.float32), self.noise_spec, self.rng)
