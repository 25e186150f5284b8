"""Small public-domain image set built from the scikit-image sample data.

Every source contributes its left 70% (columns) to the training split and a
96x96 crop from the remaining 30% to the held-out split, so the two splits
never share pixels.
"""

from __future__ import annotations

import numpy as np

SOURCES = (
    "astronaut", "brick", "camera", "cell", "chelsea", "clock", "coffee", "coins",
    "colorwheel", "grass", "gravel", "hubble_deep_field", "immunohistochemistry",
    "moon", "motorcycle_left", "retina", "rocket", "shepp_logan_phantom", "page", "text",
)
HELD_OUT_SIZE = 96
MAX_SIDE = 512


def _load(name: str) -> np.ndarray:
    from skimage import data, transform

    if name == "motorcycle_left":
        img = data.stereo_motorcycle()[0]
    elif name == "shepp_logan_phantom":
        img = data.shepp_logan_phantom()
    else:
        img = getattr(data, name)()
    img = np.asarray(img)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    else:
        img = np.clip(img.astype(np.float32), 0.0, 1.0)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    img = img[..., :3]
    scale = MAX_SIDE / max(img.shape[:2])
    if scale < 1:
        img = transform.rescale(img, scale, channel_axis=2, anti_aliasing=True).astype(np.float32)
    return np.ascontiguousarray(img)


def toy_corpus() -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Return ``(train, held_out)``, 20 images each, float32 HWC in [0, 1]."""
    train, held_out = [], []
    for name in SOURCES:
        img = _load(name)
        h, w = img.shape[:2]
        split = int(round(0.7 * w))
        train.append(np.ascontiguousarray(img[:, :split]))
        rest = img[:, split:]
        top = (h - HELD_OUT_SIZE) // 2
        left = (rest.shape[1] - HELD_OUT_SIZE) // 2
        held_out.append(np.ascontiguousarray(rest[top:top + HELD_OUT_SIZE, left:left + HELD_OUT_SIZE]))
    return train, held_out
