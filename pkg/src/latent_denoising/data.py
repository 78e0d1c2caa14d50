"""Procedural image/question/answer samples for the toy model.

Each image holds one colored shape in one grid cell; the answer names the
shape and the cell, so it can only be produced by looking at the image.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from latent_denoising.numerics import SeededRng

PAD, BOS, EOS, SEP = 0, 1, 2, 3
QUESTION = (BOS, 4, 5, SEP)  # "what", "where"
SHAPES = ("square", "cross", "diamond", "frame")
SHAPE_BASE = 8
CELL_BASE = SHAPE_BASE + len(SHAPES)
PALETTE = (
    (230, 60, 60),
    (60, 200, 80),
    (70, 110, 240),
    (240, 210, 60),
    (220, 90, 220),
    (60, 210, 220),
)
BACKGROUND = (24, 24, 32)


@dataclass(frozen=True)
class SyntheticSample:
    image_id: str
    shape: int
    cell: int
    color: int
    grid: int
    patch_size: int

    @property
    def label(self) -> int:
        """Answer class: shape and cell jointly."""
        return self.shape * self.grid * self.grid + self.cell

    @property
    def question(self) -> tuple[int, ...]:
        return QUESTION

    @property
    def answer(self) -> tuple[int, ...]:
        return (SHAPE_BASE + self.shape, CELL_BASE + self.cell, EOS)

    @property
    def text(self) -> np.ndarray:
        return np.array(self.question + self.answer, dtype=np.int64)

    @property
    def assistant_mask(self) -> np.ndarray:
        return np.array([False] * len(self.question) + [True] * len(self.answer))

    @property
    def image(self) -> np.ndarray:
        return render(self)


def shape_mask(shape: int, size: int) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    name = SHAPES[shape]
    if name == "square":
        m = (np.abs(y - c) <= size / 2 - 0.5) & (np.abs(x - c) <= size / 2 - 0.5)
    elif name == "cross":
        m = (np.abs(y - c) < 0.75) | (np.abs(x - c) < 0.75)
    elif name == "diamond":
        m = np.abs(y - c) + np.abs(x - c) <= c + 0.01
    else:
        m = (np.maximum(np.abs(y - c), np.abs(x - c)) >= c - 0.01)
    return m


def render(sample: SyntheticSample) -> np.ndarray:
    """Deterministic RGB rendering of a sample descriptor."""
    g, p = sample.grid, sample.patch_size
    img = np.empty((g * p, g * p, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    row, col = divmod(sample.cell, g)
    block = img[row * p:(row + 1) * p, col * p:(col + 1) * p]
    block[shape_mask(sample.shape, p)] = PALETTE[sample.color]
    return img


def generate_synthetic_dataset(count: int, rng: SeededRng, grid: int = 4, patch_size: int = 4, prefix: str = "img"):
    """Samples with answer classes balanced round-robin, then shuffled."""
    if count < 1:
        raise ValueError("count must be >= 1")
    n_classes = len(SHAPES) * grid * grid
    classes = np.arange(count) % n_classes
    classes = classes[rng.permutation(count)]
    colors = rng.integers(0, len(PALETTE), size=count)
    samples = []
    for i, (cls, color) in enumerate(zip(classes, colors)):
        shape, cell = divmod(int(cls), grid * grid)
        samples.append(SyntheticSample(f"{prefix}{i:05d}", shape, cell, int(color), grid, patch_size))
    return samples
