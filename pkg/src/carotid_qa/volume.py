"""3D image container, intensity preprocessing, noise degradation and VOL I/O."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateIntensity, DimensionMismatch, FormatError, OutOfBounds

VOL_MAGIC = b"VOL1"
_HEADER = struct.Struct("<4s3I3f")
MIN_VOXELS = 20


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar volume in RAS orientation.

    ``data`` is stored as a float32 array of shape ``(nz, ny, nx)`` so that the
    flattened buffer is x-fastest. Spacing is carried as metadata only; all
    ray geometry works in voxel units.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    orientation: str = "RAS"

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DimensionMismatch(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        spacing = tuple(float(np.float32(s)) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        if self.orientation != "RAS":
            raise ValueError("only RAS orientation is supported")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    def with_data(self, data):
        return Volume(data, self.spacing, self.orientation)


def percentile_band(data, low=5.0, high=95.0):
    """Linear-interpolation percentiles (index ``q * (N - 1)`` on the sorted array)."""
    return tuple(float(p) for p in np.percentile(np.asarray(data, dtype=np.float64), [low, high]))


def preprocess_with_stats(v: Volume):
    """Rescale so that the 5th/95th intensity percentiles land on 0 and 1.

    Returns the new volume and the ``(p5, p95)`` pair that was used. Values
    outside the band are not clamped.
    """
    if v.data.size < MIN_VOXELS:
        raise DegenerateIntensity(f"need at least {MIN_VOXELS} voxels for percentiles, got {v.data.size}")
    p5, p95 = percentile_band(v.data)
    if not p95 > p5:
        raise DegenerateIntensity(f"5th and 95th percentiles coincide ({p5})")
    out = (v.data.astype(np.float64) - p5) / (p95 - p5)
    return v.with_data(out.astype(np.float32)), (p5, p95)


def preprocess(v: Volume) -> Volume:
    return preprocess_with_stats(v)[0]


@dataclass(frozen=True)
class NoiseSpec:
    alpha: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"noise level alpha must lie in [0, 1], got {self.alpha}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("noise seed must be a 64-bit unsigned integer")


def add_noise(v: Volume, spec: NoiseSpec) -> Volume:
    """Blend the volume with i.i.d. standard normal noise: ``a * g + (1 - a) * v``."""
    rng = np.random.default_rng(int(spec.seed))
    g = rng.standard_normal(v.data.shape)
    a = float(spec.alpha)
    out = a * g + (1.0 - a) * v.data.astype(np.float64)
    return v.with_data(out.astype(np.float32))


def sample_bilinear(v: Volume, x: float, y: float, z: int) -> float:
    """Bilinear interpolation in the axial plane of slice ``z``."""
    nx, ny, nz = v.dims
    if not (0 <= z < nz) or int(z) != z:
        raise OutOfBounds(f"slice {z} outside [0, {nz})")
    if not (0.0 <= x <= nx - 1) or not (0.0 <= y <= ny - 1):
        raise OutOfBounds(f"point ({x}, {y}) outside [0, {nx - 1}] x [0, {ny - 1}]")
    x0 = min(int(math.floor(x)), max(nx - 2, 0))
    y0 = min(int(math.floor(y)), max(ny - 2, 0))
    x1, y1 = min(x0 + 1, nx - 1), min(y0 + 1, ny - 1)
    fx, fy = x - x0, y - y0
    img = v.data[int(z)]
    a, b, c, d = (float(img[y0, x0]), float(img[y0, x1]), float(img[y1, x0]), float(img[y1, x1]))
    top = a + fx * (b - a)
    bot = c + fx * (d - c)
    return top + fy * (bot - top)


def write_volume(v: Volume, path) -> None:
    nx, ny, nz = v.dims
    header = _HEADER.pack(VOL_MAGIC, nx, ny, nz, *v.spacing)
    payload = v.data.astype("<f4", copy=False).tobytes(order="C")
    Path(path).write_bytes(header + payload)


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(raw)
    if magic != VOL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    n = nx * ny * nz
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * n:
        raise DimensionMismatch(f"{path}: header declares {n} voxels, payload holds {len(payload) / 4:g}")
    data = np.frombuffer(payload, dtype="<f4").reshape(nz, ny, nx)
    return Volume(data.astype(np.float32), (sx, sy, sz))
