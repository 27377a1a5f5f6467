"""Synthetic training corpus and image file IO.

Training patches are Gaussian random fields at mixed length scales,
generated from a seeded, versioned recipe so runs are identical across
machines.  Values live in [0,1]; grayscale by default.
"""

from __future__ import annotations

import numpy as np
from PIL import Image
from scipy import ndimage

CORPUS_VERSION = 1


def random_field_patches(n: int, size: int = 32, channels: int = 1,
                         seed: int = 0) -> np.ndarray:
    """(n, channels, size, size) float64 patches in [0,1]."""
    rng = np.random.default_rng(np.random.SeedSequence([CORPUS_VERSION, seed]))
    out = np.empty((n, channels, size, size), dtype=np.float64)
    for i in range(n):
        for c in range(channels):
            # two smoothing scales plus a pinch of white noise
            s1, s2 = rng.uniform(1.0, 3.0), rng.uniform(4.0, 8.0)
            a = ndimage.gaussian_filter(rng.normal(size=(size, size)), s1, mode="wrap")
            b = ndimage.gaussian_filter(rng.normal(size=(size, size)), s2, mode="wrap")
            w = rng.uniform(0.3, 0.7)
            patch = w * a / (a.std() + 1e-9) + (1 - w) * b / (b.std() + 1e-9)
            patch = patch + 0.05 * rng.normal(size=(size, size))
            lo, hi = patch.min(), patch.max()
            out[i, c] = (patch - lo) / (hi - lo + 1e-9)
    return out


def load_image(path, channels: int = 1) -> np.ndarray:
    """PNG (or any PIL-readable) file -> (C,H,W) float64 in [0,1]."""
    img = Image.open(path)
    img = img.convert("L" if channels == 1 else "RGB")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if channels == 1:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def save_image(path, arr: np.ndarray) -> None:
    """(C,H,W) float in [0,1] -> 8-bit PNG."""
    a = np.clip(arr, 0.0, 1.0)
    a8 = np.round(a * 255.0).astype(np.uint8)
    if a8.shape[0] == 1:
        Image.fromarray(a8[0], mode="L").save(path)
    else:
        Image.fromarray(a8.transpose(1, 2, 0), mode="RGB").save(path)
