"""PNG output for generated images."""

from __future__ import annotations

import io
import math
import os
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(x: np.ndarray) -> np.ndarray:
    """``[B, 3, H, W]`` in ``[-1, 1]`` to ``[B, H, W, 3]`` uint8 after clamping to ``[0, 1]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"expected [B, C, H, W], got shape {x.shape}")
    if x.shape[1] == 1:
        x = np.repeat(x, 3, axis=1)
    elif x.shape[1] != 3:
        x = x[:, :3]  # latent channels beyond RGB are not viewable
    unit = np.clip((x + 1.0) / 2.0, 0.0, 1.0)
    return np.rint(unit * 255.0).astype(np.uint8).transpose(0, 2, 3, 1)


def make_grid(images: np.ndarray, columns: int | None = None, pad: int = 2) -> np.ndarray:
    """Tile uint8 ``[B, H, W, 3]`` images into one ``[rows*(H+pad)+pad, ...]`` array."""
    b, h, w, c = images.shape
    columns = columns or math.ceil(math.sqrt(b))
    rows = math.ceil(b / columns)
    grid = np.zeros((rows * (h + pad) + pad, columns * (w + pad) + pad, c), dtype=np.uint8)
    for i in range(b):
        r, col = divmod(i, columns)
        y, x = pad + r * (h + pad), pad + col * (w + pad)
        grid[y : y + h, x : x + w] = images[i]
    return grid


def png_bytes(x: np.ndarray, columns: int | None = None) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(make_grid(to_uint8(x), columns), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_png_grid(x: np.ndarray, path: str | os.PathLike, columns: int | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(png_bytes(x, columns))
    return path
