"""Appearance-shifted MNIST variants.

Every generator keeps labels and image order, and draws each image from its
own PCG64 stream ``SeedSequence(seed, spawn_key=(i,))``. Output is therefore a
pure function of (source, seed, parameters), whatever order images are made in.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence, Union

import numpy as np

from ..errors import DataError
from .idx import LabeledImages

TAU = 0.5

PLUS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.float32)
CROSS = np.array([[1, 0, 1], [0, 1, 0], [1, 0, 1]], dtype=np.float32)


def image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(index),))))


def foreground_mask(image: np.ndarray, tau: float = TAU) -> np.ndarray:
    return np.asarray(image) > tau


def _result(src: LabeledImages, images: np.ndarray) -> LabeledImages:
    return LabeledImages(images.astype(np.float32), src.labels.copy())


def gen_mnist_p(src: LabeledImages, seed: int, p_fg: float = 0.5, p_bg: float = 0.05, tau: float = TAU) -> LabeledImages:
    """Binary speckle: a pixel is lit with probability p_fg on the digit and p_bg elsewhere."""
    out = np.zeros_like(src.images)
    for i, img in enumerate(src.images[:, 0]):
        prob = np.where(foreground_mask(img, tau), p_fg, p_bg)
        out[i, 0] = image_rng(seed, i).random(img.shape) < prob
    return _result(src, out)


def _stamp(canvas: np.ndarray, glyph: np.ndarray, r: int, c: int) -> None:
    """Write ``glyph`` centered at (r, c), clipped to the canvas."""
    h, w = canvas.shape
    g = glyph.shape[0] // 2
    r0, r1 = max(r - g, 0), min(r + g + 1, h)
    c0, c1 = max(c - g, 0), min(c + g + 1, w)
    canvas[r0:r1, c0:c1] = glyph[r0 - r + g : r1 - r + g, c0 - c + g : c1 - c + g]


def gen_mnist_s(src: LabeledImages, seed: int, stride: int = 3, density: float = 0.02,
                glyph: np.ndarray = PLUS, distractor: np.ndarray = CROSS, tau: float = TAU) -> LabeledImages:
    """Glyph texture on a blank canvas.

    ``glyph`` is stamped at every foreground pixel whose row and column are
    multiples of ``stride``; ``distractor`` is then stamped at interior
    background pixels independently with probability ``density``. Later
    stamps overwrite earlier ones.
    """
    out = np.zeros_like(src.images)
    g = distractor.shape[0] // 2
    for i, img in enumerate(src.images[:, 0]):
        fg = foreground_mask(img, tau)
        canvas = out[i, 0]
        grid = np.zeros_like(fg)
        grid[::stride, ::stride] = True
        for r, c in zip(*np.nonzero(fg & grid)):
            _stamp(canvas, glyph, r, c)
        h, w = img.shape
        interior = np.zeros_like(fg)
        interior[g : h - g, g : w - g] = True
        sites = interior & ~fg & (image_rng(seed, i).random(img.shape) < density)
        for r, c in zip(*np.nonzero(sites)):
            _stamp(canvas, distractor, r, c)
    return _result(src, out)


def gen_mnist_v(src: LabeledImages, seed: int, mean: float = 0.5, sigma_fg: float = 0.25,
                sigma_bg: float = 0.05, tau: float = TAU) -> LabeledImages:
    """Same-mean Gaussian intensities, wide on the digit and narrow on the background, clamped to [0, 1]."""
    out = np.zeros_like(src.images)
    for i, img in enumerate(src.images[:, 0]):
        sigma = np.where(foreground_mask(img, tau), sigma_fg, sigma_bg)
        out[i, 0] = np.clip(mean + sigma * image_rng(seed, i).standard_normal(img.shape), 0, 1)
    return _result(src, out)


def load_backgrounds(directory: Union[str, Path]) -> list[np.ndarray]:
    """Grayscale [0, 1] arrays for every PGM/PPM/PNM file in ``directory`` (sorted by name)."""
    from PIL import Image

    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"backgrounds directory {directory} does not exist")
    out = []
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
            with Image.open(path) as im:
                out.append(np.asarray(im.convert("L"), dtype=np.float32) / 255.0)
    return out


def gen_mnist_m(src: LabeledImages, backgrounds: Union[str, Path, Sequence[np.ndarray]], seed: int) -> LabeledImages:
    """Blend each digit with a random background crop by absolute difference |crop - digit|."""
    if isinstance(backgrounds, (str, Path)):
        backgrounds = load_backgrounds(backgrounds)
    h, w = src.images.shape[2:]
    usable = [np.asarray(b, dtype=np.float32) for b in backgrounds if b.shape[0] >= h and b.shape[1] >= w]
    if not usable:
        raise DataError(f"backgrounds required: need at least one image of size >= {h}x{w}")
    out = np.zeros_like(src.images)
    for i, img in enumerate(src.images[:, 0]):
        rng = image_rng(seed, i)
        bg = usable[rng.integers(len(usable))]
        r = rng.integers(bg.shape[0] - h + 1)
        c = rng.integers(bg.shape[1] - w + 1)
        out[i, 0] = np.abs(bg[r : r + h, c : c + w] - img)
    return _result(src, out)


VARIANTS = {"p": gen_mnist_p, "s": gen_mnist_s, "v": gen_mnist_v}
