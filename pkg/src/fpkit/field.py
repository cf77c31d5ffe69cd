"""Centered unitary 2-D DFTs, window crops and embeds on complex arrays.

Complex fields are plain numpy arrays. Transforms act on the last two axes,
so a stack of fields can be transformed in one call. The zero frequency sits
at index ``size // 2`` on each axis for both even and odd sizes.
"""

import numpy as np
from scipy import ndimage

from .errors import GeometryError, InvalidField


def _check_finite(f):
    if not np.all(np.isfinite(f)):
        raise InvalidField("field contains non-finite values")


def dft2_centered(f, direction="forward"):
    """Unitary centered 2-D DFT over the last two axes.

    Args:
        f: complex or real array with ``ndim >= 2``.
        direction: ``"forward"`` or ``"inverse"``.

    Returns:
        Complex array of the same shape.
    """
    f = np.asarray(f)
    if f.ndim < 2:
        raise InvalidField(f"expected at least 2 dimensions, got shape {f.shape}")
    _check_finite(f)
    axes = (-2, -1)
    shifted = np.fft.ifftshift(f, axes=axes)
    if direction == "forward":
        out = np.fft.fft2(shifted, axes=axes, norm="ortho")
    elif direction == "inverse":
        out = np.fft.ifft2(shifted, axes=axes, norm="ortho")
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return np.fft.fftshift(out, axes=axes)


def window_bounds(shape, center, size):
    """Row/column start indices of the ``size`` x ``size`` window at ``center``.

    Raises GeometryError if the window does not fit inside ``shape``.
    """
    r0 = int(center[0]) - size // 2
    c0 = int(center[1]) - size // 2
    h, w = shape[-2], shape[-1]
    if size < 1 or r0 < 0 or c0 < 0 or r0 + size > h or c0 + size > w:
        raise GeometryError(
            f"window of size {size} at center {tuple(center)} does not fit in {h}x{w}"
        )
    return r0, c0


def crop_centered(f, center, size):
    f = np.asarray(f)
    r0, c0 = window_bounds(f.shape, center, size)
    return f[..., r0:r0 + size, c0:c0 + size].copy()


def embed_replace(dst, src, center, mask):
    """Return a copy of ``dst`` with the window at ``center`` overwritten by
    ``src`` wherever ``mask`` is set."""
    dst = np.asarray(dst)
    src = np.asarray(src)
    mask = np.asarray(mask, dtype=bool)
    if src.ndim != 2 or src.shape[0] != src.shape[1]:
        raise GeometryError(f"src must be square 2-D, got shape {src.shape}")
    if mask.shape != src.shape:
        raise GeometryError(f"mask shape {mask.shape} does not match src shape {src.shape}")
    size = src.shape[0]
    r0, c0 = window_bounds(dst.shape, center, size)
    out = dst.astype(np.result_type(dst, src), copy=True)
    win = out[r0:r0 + size, c0:c0 + size]
    win[mask] = src[mask]
    return out


def embed_add(dst, src, center):
    """Adjoint of :func:`crop_centered`: add ``src`` into the window of a copy of ``dst``."""
    dst = np.asarray(dst)
    src = np.asarray(src)
    size = src.shape[-1]
    r0, c0 = window_bounds(dst.shape, center, size)
    out = dst.astype(np.result_type(dst, src), copy=True)
    out[r0:r0 + size, c0:c0 + size] += src
    return out


def resize_bilinear(img, size):
    """Bilinear resize of a real 2-D array (or stack on the last two axes)
    to ``size x size`` with half-pixel aligned sample grids."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    if (h, w) == (size, size):
        return img.copy()
    zoom = (1.0,) * (img.ndim - 2) + (size / h, size / w)
    return ndimage.zoom(img, zoom, order=1, mode="nearest", grid_mode=True)
