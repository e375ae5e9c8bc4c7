"""Procedural 18-class shapes dataset (3 shapes x 6 colors) on an integer pixel grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SHAPES = ("square", "circle", "triangle")
COLORS = (
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
)
BACKGROUND = (16, 16, 16)
NUM_CLASSES = len(SHAPES) * len(COLORS)


def class_name(label: int) -> str:
    shape, color = divmod(int(label), len(COLORS))
    return f"{SHAPES[shape]}-{color}"


def _mask(shape: str, size: int, cy: int, cx: int, r: int) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size]
    dy, dx = y - cy, x - cx
    if shape == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    # apex at the top, base on row cy + r; half-width grows by one pixel every two rows
    return (dy >= -r) & (dy <= r) & (2 * np.abs(dx) <= dy + r)


@dataclass(frozen=True)
class ShapesDataset:
    """Infinite stream of ``[3, S, S]`` images in ``[-1, 1]``.

    Pixels are a pure function of ``(label, instance)``: geometry is drawn with
    integer arithmetic from a generator seeded by ``(seed, label, instance)``.
    """

    image_size: int = 32
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return NUM_CLASSES

    def geometry(self, label: int, instance: int) -> tuple[int, int, int]:
        s = self.image_size
        rng = np.random.default_rng([self.seed, int(label), int(instance)])
        r = int(rng.integers(s // 8, s // 4 + 1))
        cy = int(rng.integers(r, s - r))
        cx = int(rng.integers(r, s - r))
        return cy, cx, r

    def raw(self, label: int, instance: int) -> np.ndarray:
        """uint8 ``[S, S, 3]`` rendering."""
        if not 0 <= label < NUM_CLASSES:
            raise ValueError(f"label must be in [0, {NUM_CLASSES}), got {label}")
        shape_idx, color_idx = divmod(int(label), len(COLORS))
        cy, cx, r = self.geometry(label, instance)
        img = np.empty((self.image_size, self.image_size, 3), dtype=np.uint8)
        img[:] = BACKGROUND
        img[_mask(SHAPES[shape_idx], self.image_size, cy, cx, r)] = COLORS[color_idx]
        return img

    def image(self, label: int, instance: int, dtype=np.float32) -> np.ndarray:
        raw = self.raw(label, instance).transpose(2, 0, 1).astype(dtype)
        return raw / dtype(127.5) - dtype(1.0)

    def batch(self, rng: np.random.Generator, size: int, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
        """Random labels and instances drawn from ``rng``; returns ``(images, labels)``."""
        labels = rng.integers(0, NUM_CLASSES, size=size)
        instances = rng.integers(0, 2 ** 31, size=size)
        images = np.stack([self.image(int(c), int(i), dtype) for c, i in zip(labels, instances)])
        return images, labels.astype(np.int64)
