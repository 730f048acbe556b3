"""Cartesian <-> polar geometry around a vessel centre.

Ray ``i`` points along ``2*pi*i/31`` (ray 0 along +x, counter-clockwise).
Radial sample ``k`` sits at distance ``k + 1`` voxels from the centre, and the
patch covers three slices above and below the centre slice.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InvalidContour, OutOfBounds, ShapeMismatch
from .volume import Volume


@dataclass(frozen=True)
class PolarGrid:
    n_angles: int = 31
    n_radii: int = 127
    n_slices: int = 7
    radial_step: float = 1.0

    @property
    def half_slices(self):
        return self.n_slices // 2

    @property
    def angles(self):
        return 2.0 * np.pi * np.arange(self.n_angles) / self.n_angles

    @property
    def shape(self):
        return (self.n_angles, self.n_radii, self.n_slices)


GRID = PolarGrid()
ANGLES = GRID.angles
_COS = np.cos(ANGLES)
_SIN = np.sin(ANGLES)


@dataclass(frozen=True, eq=False)
class PolarPatch:
    center: tuple
    samples: np.ndarray
    grid: PolarGrid = GRID

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.shape != self.grid.shape:
            raise ShapeMismatch(f"polar patch must have shape {self.grid.shape}, got {samples.shape}")
        object.__setattr__(self, "samples", samples)


@dataclass(frozen=True, eq=False)
class ContourPair:
    """Per-ray lumen radius and wall width around ``center = (x, y, z)``."""

    center: tuple
    lumen_radii: np.ndarray
    wall_widths: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.lumen_radii, dtype=np.float64).copy()
        w = np.asarray(self.wall_widths, dtype=np.float64).copy()
        if r.shape != (GRID.n_angles,) or w.shape != (GRID.n_angles,):
            raise InvalidContour(f"expected {GRID.n_angles} radii and widths, got {r.shape} and {w.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(w))):
            raise InvalidContour("radii and widths must be finite")
        if np.any(r <= 0) or np.any(w <= 0):
            raise InvalidContour("radii and widths must be strictly positive")
        r.setflags(write=False)
        w.setflags(write=False)
        c = tuple(float(v) for v in self.center)
        if len(c) == 2:
            c = c + (0.0,)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "lumen_radii", r)
        object.__setattr__(self, "wall_widths", w)

    @property
    def outer_radii(self):
        return self.lumen_radii + self.wall_widths

    def as_matrix(self):
        """The 31x2 (radius, width) prediction matrix."""
        return np.column_stack([self.lumen_radii, self.wall_widths])

    def to_json(self):
        return {
            "center": list(self.center),
            "lumen_radii": self.lumen_radii.tolist(),
            "wall_widths": self.wall_widths.tolist(),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(tuple(obj["center"]), obj["lumen_radii"], obj["wall_widths"])


def polar_transform(v: Volume, center, grid: PolarGrid = GRID) -> PolarPatch:
    """Cast equiangular rays around ``center`` on the centre slice and its neighbours.

    In-plane sample positions are clamped to the image; a slice range that
    leaves the volume raises :class:`OutOfBounds`.
    """
    cx, cy = float(center[0]), float(center[1])
    cz = int(center[2])
    nx, ny, nz = v.dims
    h = grid.half_slices
    if cz - h < 0 or cz + h >= nz:
        raise OutOfBounds(f"slices {cz - h}..{cz + h} exceed volume depth {nz}")
    if grid == GRID:
        cos_t, sin_t = _COS, _SIN
    else:
        cos_t, sin_t = np.cos(grid.angles), np.sin(grid.angles)
    samples = kernels.polar_sample(v.data, cx, cy, cz, cos_t * grid.radial_step,
                                   sin_t * grid.radial_step, grid.n_radii, h)
    return PolarPatch((cx, cy, cz), samples, grid)


def rays_to_points(center, distances):
    """Cartesian vertices at ``distances[i]`` along canonical ray ``i``."""
    d = np.asarray(distances, dtype=np.float64)
    return np.column_stack([center[0] + d * _COS, center[1] + d * _SIN])


def contours_to_cartesian(c: ContourPair):
    """Closed lumen and outer-wall polygons (31 vertices each, implicitly closed)."""
    return rays_to_points(c.center, c.lumen_radii), rays_to_points(c.center, c.outer_radii)


def polygon_to_radii(polygon, center):
    """Distance of each vertex from ``center``; inverse of :func:`rays_to_points` on vertices."""
    p = np.asarray(polygon, dtype=np.float64)
    return np.hypot(p[:, 0] - center[0], p[:, 1] - center[1])


def cartesian_to_contours(lumen_polygon, wall_polygon, center) -> ContourPair:
    r = polygon_to_radii(lumen_polygon, center)
    outer = polygon_to_radii(wall_polygon, center)
    return ContourPair(tuple(center), r, outer - r)


def point_in_polygon(point, polygon) -> bool:
    """Even-odd test; points exactly on an edge may land on either side."""
    p = np.asarray(polygon, dtype=np.float64)
    x, y = float(point[0]), float(point[1])
    xi, yi = p[:, 0], p[:, 1]
    xj, yj = np.roll(xi, 1), np.roll(yi, 1)
    spans = (yi > y) != (yj > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_cross = xj + (y - yj) * (xi - xj) / (yi - yj)
    return bool(np.count_nonzero(spans & (x < x_cross)) % 2)
