"""Class-colour overlays for visual inspection of masks."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import IGNORE_INDEX


def render_overlay(image: np.ndarray, mask: np.ndarray, palette: Sequence[Sequence[int]],
                   opacity: float = 0.5) -> np.ndarray:
    """Alpha-blend palette colours over ``image``; class 0 and ignored pixels stay untouched.

    Blended values are round-half-up((1 - opacity) * pixel + opacity * colour).
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"overlay wants an (H, W, 3) uint8 image, got {image.shape} {image.dtype}")
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    if not 0.0 <= opacity <= 1.0:
        raise ValueError(f"opacity must lie in [0, 1], got {opacity}")
    classes = mask[mask != IGNORE_INDEX]
    needed = int(classes.max()) + 1 if classes.size else 0
    if needed > len(palette):
        raise ValueError(f"palette has {len(palette)} colours but the mask uses {needed} classes")
    colors = np.zeros((max(len(palette), 1), 3), dtype=np.float64)
    colors[:len(palette)] = np.asarray(palette, dtype=np.float64).reshape(-1, 3)
    paint = (mask != 0) & (mask != IGNORE_INDEX)
    out = image.copy()
    src = image[paint].astype(np.float64)
    blended = (1.0 - opacity) * src + opacity * colors[mask[paint].astype(np.intp)]
    out[paint] = np.floor(blended + 0.5).astype(np.uint8)
    return out
