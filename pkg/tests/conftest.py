"""Shared synthetic image builders for the test suite."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import zoom

from forgemask.imagecore import ImageBuffer


def textured_image(seed: int, size: int = 512) -> ImageBuffer:
    """Color image with low-frequency structure, blocky patches, and mild noise.

    Rich enough in corners that the keypoint detector finds hundreds of
    features at any of the sizes used in the tests.
    """
    rng = np.random.default_rng(seed)
    base = rng.uniform(0, 255, (size // 8, size // 8, 3))
    img = zoom(base, (8, 8, 1), order=1)
    img += rng.normal(0, 6, img.shape)
    n_blocks = max(24, (size * size) // 400)
    for _ in range(n_blocks):
        x0 = int(rng.integers(0, size - 28))
        y0 = int(rng.integers(0, size - 28))
        w = int(rng.integers(8, 28))
        h = int(rng.integers(8, 28))
        img[y0 : y0 + h, x0 : x0 + w] = rng.uniform(0, 255, 3)
    return ImageBuffer.from_array(np.clip(img, 0, 255).astype(np.uint8))


def checkerboard(size: int = 256, square: int = 16) -> ImageBuffer:
    yy, xx = np.mgrid[0:size, 0:size]
    board = (((yy // square) + (xx // square)) % 2 * 255).astype(np.uint8)
    return ImageBuffer.from_array(board)


def random_affine(rng: np.random.Generator, max_translation: float = 20.0):
    """Small random similarity-like affine: scale in [0.9, 1.1], rotation within 5 degrees."""
    from forgemask.alignment import AffineTransform

    ang = np.radians(rng.uniform(-5, 5))
    s = rng.uniform(0.9, 1.1)
    return AffineTransform(
        s * np.cos(ang),
        -s * np.sin(ang),
        float(rng.uniform(-max_translation, max_translation)),
        s * np.sin(ang),
        s * np.cos(ang),
        float(rng.uniform(-max_translation, max_translation)),
    )
