"""Middlebury .flo flow files and the standard flow color wheel."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DimensionError

FLO_MAGIC = np.float32(202021.25)  # spells "PIEH" when read as bytes


def write_flo(path, flow: np.ndarray) -> None:
    """Write a (2, H, W) flow field (channel 0 = u/x, 1 = v/y)."""
    flow = np.asarray(flow, np.float32)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise DimensionError(f"write_flo: expected (2, H, W), got {flow.shape}")
    _, h, w = flow.shape
    with open(path, "wb") as f:
        np.asarray([FLO_MAGIC], np.float32).tofile(f)
        np.asarray([w, h], np.int32).tofile(f)
        # interleaved (u, v) row-major
        np.ascontiguousarray(flow.transpose(1, 2, 0)).tofile(f)


def read_flo(path) -> np.ndarray:
    """Read a .flo file as a (2, H, W) float32 array."""
    data = Path(path).read_bytes()
    magic = np.frombuffer(data, np.float32, count=1, offset=0)[0]
    if magic != FLO_MAGIC:
        raise DimensionError(f"{path}: bad .flo magic {magic!r}")
    w, h = np.frombuffer(data, np.int32, count=2, offset=4)
    uv = np.frombuffer(data, np.float32, count=2 * int(w) * int(h), offset=12)
    return np.ascontiguousarray(uv.reshape(int(h), int(w), 2).transpose(2, 0, 1))


def _color_wheel() -> np.ndarray:
    """55-entry RGB color wheel (Baker et al. convention)."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    ncols = ry + yg + gc + cb + bm + mr
    wheel = np.zeros((ncols, 3))
    col = 0
    wheel[0:ry, 0] = 255
    wheel[0:ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col:col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col:col + yg, 1] = 255
    col += yg
    wheel[col:col + gc, 1] = 255
    wheel[col:col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col:col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col:col + cb, 2] = 255
    col += cb
    wheel[col:col + bm, 2] = 255
    wheel[col:col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col:col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col:col + mr, 0] = 255
    return wheel


def flow_to_color(flow: np.ndarray, max_radius: float | None = None) -> np.ndarray:
    """Render a (2, H, W) flow as an (H, W, 3) uint8 image.

    Hue encodes direction and saturation encodes magnitude; zero flow maps
    to the white center of the wheel.
    """
    flow = np.asarray(flow, np.float32)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise DimensionError(f"flow_to_color: expected (2, H, W), got {flow.shape}")
    u, v = flow[0], flow[1]
    rad = np.sqrt(u * u + v * v)
    if max_radius is None:
        max_radius = float(rad.max())
    scale = max(max_radius, 1e-5)
    un = u / scale
    vn = v / scale
    radn = np.sqrt(un * un + vn * vn)
    wheel = _color_wheel()
    ncols = wheel.shape[0]
    angle = np.arctan2(-vn, -un) / np.pi
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = fk - k0
    img = np.zeros(u.shape + (3,), np.uint8)
    for ch in range(3):
        col0 = wheel[k0, ch] / 255.0
        col1 = wheel[k1, ch] / 255.0
        col = (1 - f) * col0 + f * col1
        inside = radn <= 1
        col[inside] = 1 - radn[inside] * (1 - col[inside])
        col[~inside] *= 0.75
        img[..., ch] = np.floor(255 * col)
    return img
