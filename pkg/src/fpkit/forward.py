"""Acquisition geometry and the FP measurement operator.

A high-resolution object of size ``N x N`` is transformed to the centered
spectrum; each illumination selects an ``m x m`` sub-aperture window, a
binary circular pupil of radius ``m / 2`` is applied, and the inverse
transform gives the low-resolution field whose squared modulus is recorded.

Overlap between neighbouring sub-apertures is the area of intersection of
two pupil disks divided by the disk area.
"""

from dataclasses import dataclass, field
from functools import cached_property
import math

import numpy as np

from .errors import GeometryError
from .field import dft2_centered, window_bounds


def overlap_area_ratio(spacing, radius):
    """Fraction of a disk's area shared with an equal disk ``spacing`` away."""
    if spacing < 0 or radius <= 0:
        raise GeometryError(f"need spacing >= 0 and radius > 0, got {spacing}, {radius}")
    d, r = float(spacing), float(radius)
    if d >= 2 * r:
        return 0.0
    area = 2 * r * r * math.acos(d / (2 * r)) - 0.5 * d * math.sqrt(4 * r * r - d * d)
    return area / (math.pi * r * r)


def solve_spacing(overlap, radius):
    """Center spacing giving the requested area overlap, by bisection on [0, 2r]."""
    if not 0 <= overlap < 1:
        raise GeometryError(f"overlap must lie in [0, 1), got {overlap}")
    if radius <= 0:
        raise GeometryError(f"radius must be positive, got {radius}")
    if overlap == 0:
        return 2.0 * radius
    lo, hi = 0.0, 2.0 * radius
    # ratio is strictly decreasing in the spacing
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if overlap_area_ratio(mid, radius) > overlap:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-14 * radius:
            break
    return 0.5 * (lo + hi)


def pupil_mask(m, radius):
    if radius > m / 2:
        raise GeometryError(f"pupil radius {radius} exceeds half the window size {m}")
    idx = np.arange(m) - m // 2
    dist = np.hypot(idx[:, None], idx[None, :])
    return dist < radius


@dataclass(frozen=True)
class AcquisitionGeometry:
    """Sub-aperture layout in spectrum coordinates.

    ``centers`` are integer (row, col) spectrum indices in raster order;
    ``ideal_centers`` are the unrounded, unclamped lattice positions they
    came from, and ``clamped`` flags centers pulled inward so their window
    fits inside the spectrum.
    """

    high_res: int
    low_res: int
    overlap: float
    spacing: float
    grid_side: int
    centers: tuple
    ideal_centers: tuple
    clamped: tuple = field(repr=False)

    @property
    def pupil_radius(self):
        return self.low_res / 2

    @property
    def count(self):
        return len(self.centers)

    @property
    def dc_index(self):
        return self.count // 2

    @property
    def max_rounding_error(self):
        errs = [
            max(abs(c[0] - ic[0]), abs(c[1] - ic[1]))
            for c, ic, cl in zip(self.centers, self.ideal_centers, self.clamped)
            if not cl
        ]
        return max(errs, default=0.0)

    @cached_property
    def pupil(self):
        return pupil_mask(self.low_res, self.pupil_radius)

    @cached_property
    def window_index(self):
        """Row and column index arrays of shape (L, m) for gathering all windows."""
        m = self.low_res
        offs = np.arange(m) - m // 2
        centers = np.asarray(self.centers, dtype=np.int64).reshape(-1, 2)
        rows = centers[:, :1] + offs[None, :]
        cols = centers[:, 1:] + offs[None, :]
        return rows, cols

    def to_dict(self):
        return {
            "high_res": self.high_res,
            "low_res": self.low_res,
            "overlap": self.overlap,
            "spacing": self.spacing,
            "grid_side": self.grid_side,
            "pupil_radius": self.pupil_radius,
            "count": self.count,
            "centers": [list(c) for c in self.centers],
            "ideal_centers": [list(c) for c in self.ideal_centers],
            "clamped": list(self.clamped),
            "max_rounding_error": self.max_rounding_error,
        }

    @classmethod
    def from_dict(cls, d):
        geom = build_geometry(d["high_res"], d["low_res"], d["overlap"])
        if [list(c) for c in geom.centers] != [list(c) for c in d["centers"]]:
            raise GeometryError("stored centers do not match the rebuilt geometry")
        return geom


def build_geometry(N, m, overlap):
    """Symmetric odd-sided grid of sub-apertures covering an ``N x N`` spectrum.

    The grid side G is the smallest odd integer with ``(G - 1) * s >= N - m``
    where ``s`` is the spacing for the requested overlap. Lattice points are
    rounded to integer pixels and clamped so every window fits.
    """
    N, m = int(N), int(m)
    if m > N:
        raise GeometryError(f"low-res size {m} exceeds high-res size {N}")
    if m < 2 or m % 2:
        raise GeometryError(f"low-res size must be even and >= 2, got {m}")
    r = m / 2
    s = solve_spacing(overlap, r)
    span = N - m
    G = 1
    while (G - 1) * s < span - 1e-9:
        G += 2
    dc = N // 2
    lo, hi = m // 2, N - m // 2
    ks = np.arange(G) - (G - 1) // 2
    ideal_1d = dc + ks * s
    rounded_1d = np.floor(ideal_1d + 0.5).astype(int)
    clamped_1d = (rounded_1d < lo) | (rounded_1d > hi)
    final_1d = np.clip(rounded_1d, lo, hi)
    centers, ideal, clamped = [], [], []
    for i in range(G):
        for j in range(G):
            centers.append((int(final_1d[i]), int(final_1d[j])))
            ideal.append((float(ideal_1d[i]), float(ideal_1d[j])))
            clamped.append(bool(clamped_1d[i] or clamped_1d[j]))
    for c in centers:
        window_bounds((N, N), c, m)
    return AcquisitionGeometry(
        high_res=N,
        low_res=m,
        overlap=float(overlap),
        spacing=float(s),
        grid_side=G,
        centers=tuple(centers),
        ideal_centers=tuple(ideal),
        clamped=tuple(clamped),
    )


@dataclass
class MeasurementStack:
    geometry: AcquisitionGeometry
    images: np.ndarray
    scale: float
    sample_id: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        g = self.geometry
        if self.images.shape != (g.count, g.low_res, g.low_res):
            raise GeometryError(
                f"stack shape {self.images.shape} does not match geometry "
                f"({g.count}, {g.low_res}, {g.low_res})"
            )

    @property
    def dc_image(self):
        return self.images[self.geometry.dc_index]


def _check_object(obj, geom):
    obj = np.asarray(obj)
    if obj.shape != (geom.high_res, geom.high_res):
        raise GeometryError(
            f"object shape {obj.shape} does not match geometry size {geom.high_res}"
        )
    return obj


def spectrum_windows(spectrum, geom):
    """Pupil-masked sub-aperture windows of a centered spectrum, shape (L, m, m)."""
    rows, cols = geom.window_index
    return spectrum[rows[:, :, None], cols[:, None, :]] * geom.pupil


def forward_fields(obj, geom):
    """All low-resolution complex fields, shape (L, m, m)."""
    obj = _check_object(obj, geom)
    spectrum = dft2_centered(obj)
    return dft2_centered(spectrum_windows(spectrum, geom), "inverse")


def forward_field(obj, geom, j):
    if not 0 <= j < geom.count:
        raise GeometryError(f"illumination index {j} out of range [0, {geom.count})")
    obj = _check_object(obj, geom)
    spectrum = dft2_centered(obj)
    rows, cols = geom.window_index
    win = spectrum[rows[j][:, None], cols[j][None, :]] * geom.pupil
    return dft2_centered(win, "inverse")


def forward_measure(obj, geom, sample_id=""):
    fields = forward_fields(obj, geom)
    images = fields.real ** 2 + fields.imag ** 2
    scale = float(images.max()) if images.size else 0.0
    return MeasurementStack(geom, images, scale, sample_id)


def support_union(geom):
    """Boolean N x N mask of spectrum pixels seen by at least one pupil."""
    N, m = geom.high_res, geom.low_res
    union = np.zeros((N, N), dtype=bool)
    pupil = geom.pupil
    for c in geom.centers:
        r0, c0 = c[0] - m // 2, c[1] - m // 2
        union[r0:r0 + m, c0:c0 + m] |= pupil
    return union


def bandlimit(obj, geom):
    """Zero every spectral component outside the measured support."""
    spectrum = dft2_centered(obj)
    return dft2_centered(spectrum * support_union(geom), "inverse")
