import numpy as np
from PIL import Image


def make_image(seed: int, width: int, height: int) -> Image.Image:
    """Low-frequency noise image so patch features vary across the grid."""
    rng = np.random.default_rng(seed)
    coarse = rng.integers(0, 255, (height // 8 + 1, width // 8 + 1, 3), dtype=np.uint8)
    img = Image.fromarray(coarse).resize((width, height), Image.BILINEAR)
    return img
