"""Seeded procedural grayscale textures used when no image corpus is given."""

import numpy as np


def procedural_texture(rng, size, smooth_edges=1.0):
    """Random smooth blobs plus a few straight edges, as a uint8 image.

    Args:
        rng: ``numpy.random.Generator``.
        size: output side length in pixels.
        smooth_edges: edge transition width in pixels.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    for _ in range(int(rng.integers(4, 10))):
        cy, cx = rng.uniform(0, size, 2)
        sigma = rng.uniform(size / 16, size / 4)
        img += rng.uniform(-1, 1) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    for _ in range(int(rng.integers(1, 4))):
        theta = rng.uniform(0, np.pi)
        py, px = rng.uniform(0, size, 2)
        dist = (yy - py) * np.cos(theta) + (xx - px) * np.sin(theta)
        img += rng.uniform(-0.6, 0.6) / (1 + np.exp(-dist / smooth_edges))
    img -= img.min()
    peak = img.max()
    if peak > 0:
        img /= peak
    return np.round(img * 255).astype(np.uint8)
