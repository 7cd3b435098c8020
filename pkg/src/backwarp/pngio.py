"""8-bit RGB PNG read/write helpers."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import DimensionError


def write_png(path, img: np.ndarray) -> None:
    """Write an image given as (3, H, W) or (H, W, 3) floats in [0, 1]."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[-1] != 3:
        img = img.transpose(1, 2, 0)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise DimensionError(f"write_png: expected an RGB image, got shape {img.shape}")
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Read an RGB PNG as (3, H, W) float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), np.uint8)
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid, as a PNG write/read round trip would."""
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0)
    return (q / 255.0).astype(np.float32)
