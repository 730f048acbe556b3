"""Synthetic black-blood-like phantoms with exact lumen/wall ground truth.

Vessels are concentric ellipses (lumen inside wall) whose centre drifts slowly
along z. Intensities are dark in the lumen, bright in the wall ring and
mid-grey in the background, with area-weighted partial voluming at the
boundaries and additive Gaussian texture.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import kernels
from .errors import CenterOutsideLumen, ConfigError, GeometryOverflow
from .volume import Volume

MARGIN = 5.0
TRUTH_VERTICES = 256


@dataclass(frozen=True)
class Ellipse:
    a: float
    b: float
    phi: float = 0.0

    def level(self, dx, dy):
        """``(u/a)^2 + (v/b)^2`` for offsets from the centre (< 1 means inside)."""
        c, s = math.cos(self.phi), math.sin(self.phi)
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (u / self.a) ** 2 + (v / self.b) ** 2

    def polygon(self, center, n=TRUTH_VERTICES):
        t = 2.0 * np.pi * np.arange(n) / n
        c, s = math.cos(self.phi), math.sin(self.phi)
        u, v = self.a * np.cos(t), self.b * np.sin(t)
        return np.column_stack([center[0] + u * c - v * s, center[1] + u * s + v * c])

    @property
    def max_radius(self):
        return max(self.a, self.b)


def ray_ellipse_distance(ellipse: Ellipse, ellipse_center, origin, theta):
    """Distance from ``origin`` to the ellipse along direction(s) ``theta``.

    ``origin`` must lie strictly inside; the positive root of the ray/ellipse
    quadratic is returned.
    """
    theta = np.asarray(theta, dtype=np.float64)
    c, s = math.cos(ellipse.phi), math.sin(ellipse.phi)
    px, py = origin[0] - ellipse_center[0], origin[1] - ellipse_center[1]
    pu, pv = px * c + py * s, -px * s + py * c
    dx, dy = np.cos(theta), np.sin(theta)
    du, dv = dx * c + dy * s, -dx * s + dy * c
    ia2, ib2 = 1.0 / ellipse.a ** 2, 1.0 / ellipse.b ** 2
    qa = du * du * ia2 + dv * dv * ib2
    qb = 2.0 * (pu * du * ia2 + pv * dv * ib2)
    qc = pu * pu * ia2 + pv * pv * ib2 - 1.0
    return (-qb + np.sqrt(qb * qb - 4.0 * qa * qc)) / (2.0 * qa)


@dataclass(frozen=True)
class SliceTruth:
    z: int
    center: tuple
    lumen: Ellipse
    wall: Ellipse

    def lumen_polygon(self, n=TRUTH_VERTICES):
        return self.lumen.polygon(self.center, n)

    def wall_polygon(self, n=TRUTH_VERTICES):
        return self.wall.polygon(self.center, n)


@dataclass(frozen=True)
class VesselTruth:
    participant_id: str
    vessel_id: str
    slices: tuple

    def __post_init__(self):
        for st in self.slices:
            if not (st.wall.a > st.lumen.a and st.wall.b > st.lumen.b and st.wall.phi == st.lumen.phi):
                raise ValueError(f"wall must strictly enclose lumen on slice {st.z}")

    def at(self, z) -> SliceTruth:
        for st in self.slices:
            if st.z == z:
                return st
        raise KeyError(f"{self.participant_id}/{self.vessel_id} has no annotation at z={z}")

    @property
    def annotated_z(self):
        return [st.z for st in self.slices]

    def to_json(self):
        return {
            "participant_id": self.participant_id,
            "vessel_id": self.vessel_id,
            "slices": [
                {
                    "z": st.z,
                    "center": [st.center[0], st.center[1]],
                    "lumen": {"a": st.lumen.a, "b": st.lumen.b, "phi": st.lumen.phi},
                    "wall": {"a": st.wall.a, "b": st.wall.b, "phi": st.wall.phi},
                }
                for st in self.slices
            ],
        }

    @classmethod
    def from_json(cls, obj):
        slices = tuple(
            SliceTruth(int(s["z"]), (float(s["center"][0]), float(s["center"][1])),
                       Ellipse(**s["lumen"]), Ellipse(**s["wall"]))
            for s in obj["slices"]
        )
        return cls(obj["participant_id"], obj["vessel_id"], slices)


def truth_radii(t: VesselTruth, z, center, n_angles=31):
    """Ground-truth lumen radii and wall widths seen from an arbitrary centre.

    Returns two arrays of length ``n_angles`` for rays at ``2*pi*i/n_angles``.
    """
    st = t.at(z)
    origin = (float(center[0]), float(center[1]))
    if st.lumen.level(origin[0] - st.center[0], origin[1] - st.center[1]) >= 1.0:
        raise CenterOutsideLumen(f"centre {origin} is not strictly inside the lumen at z={z}")
    theta = 2.0 * np.pi * np.arange(n_angles) / n_angles
    r_lumen = ray_ellipse_distance(st.lumen, st.center, origin, theta)
    r_wall = ray_ellipse_distance(st.wall, st.center, origin, theta)
    return r_lumen, r_wall - r_lumen


@dataclass
class CohortSpec:
    n_participants: int = 10
    vessels_per_participant: int = 2
    annotated_slices_per_vessel: int = 4
    dims: tuple = (320, 160, 10)
    spacing: tuple = (0.5, 0.5, 2.0)
    lumen_mean: float = 0.1
    wall_mean: float = 0.7
    background_mean: float = 0.4
    texture_sigma: float = 0.05
    background_gradient: float = 0.05
    lumen_radius: tuple = (4.5, 7.5)
    aspect: tuple = (0.75, 1.0)
    wall_thickness: tuple = (2.5, 4.5)
    radius_variation: float = 0.05
    drift_sigma: float = 0.3
    center_jitter: float = 5.0
    supersample: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("n_participants", "vessels_per_participant", "annotated_slices_per_vessel"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("lumen_mean", "wall_mean", "background_mean"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3:
            raise ConfigError("dims must have three entries")
        if self.dims[2] < self.annotated_slices_per_vessel + 6:
            raise ConfigError("nz must leave three slices of margin above and below the annotations")
        for name in ("lumen_radius", "aspect", "wall_thickness", "spacing"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        if not 0 < self.aspect[0] <= self.aspect[1] <= 1.0:
            raise ConfigError("aspect range must lie in (0, 1]")
        if self.wall_thickness[0] <= 0:
            raise ConfigError("wall thickness must be positive")

    @classmethod
    def from_dict(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown cohort key: {unknown[0]}")
        return cls(**obj)

    def to_dict(self):
        return asdict(self)

    def intensity_levels(self):
        return self.lumen_mean, self.wall_mean, self.background_mean


def participant_id(index):
    return f"P{index:03d}"


def vessel_ids(n):
    return ["L", "R"] if n == 2 else [f"V{i}" for i in range(n)]


def annotated_slices(nz, n):
    return sorted({int(round(z)) for z in np.linspace(3, nz - 4, n)})


def _participant_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _sample_vessel(spec: CohortSpec, rng, pid, vid, slot):
    nx, ny, nz = spec.dims
    nv = spec.vessels_per_participant
    cx = nx * (2 * slot + 1) / (2 * nv) + rng.uniform(-1, 1) * spec.center_jitter
    cy = ny / 2.0 + rng.uniform(-1, 1) * spec.center_jitter
    a_l = rng.uniform(*spec.lumen_radius)
    b_l = a_l * rng.uniform(*spec.aspect)
    phi = rng.uniform(0.0, math.pi) if b_l < a_l else 0.0
    thick = rng.uniform(*spec.wall_thickness)
    geometry = []
    x, y = cx, cy
    for z in range(nz):
        if z:
            x += rng.normal(0.0, spec.drift_sigma) if spec.drift_sigma > 0 else 0.0
            y += rng.normal(0.0, spec.drift_sigma) if spec.drift_sigma > 0 else 0.0
        scale = 1.0 + rng.uniform(-1, 1) * spec.radius_variation if spec.radius_variation > 0 else 1.0
        lumen = Ellipse(a_l * scale, b_l * scale, phi)
        wall = Ellipse(lumen.a + thick, lumen.b + thick, phi)
        reach = wall.max_radius + MARGIN
        if x - reach < 0 or y - reach < 0 or x + reach > nx - 1 or y + reach > ny - 1:
            raise GeometryOverflow(
                f"{pid}/{vid} slice {z}: wall radius {wall.max_radius:.2f} at ({x:.2f}, {y:.2f}) "
                f"leaves the {nx}x{ny} plane with a {MARGIN:g}-voxel margin")
        geometry.append(SliceTruth(z, (float(x), float(y)), lumen, wall))
    keep = set(annotated_slices(nz, spec.annotated_slices_per_vessel))
    truth = VesselTruth(pid, vid, tuple(g for g in geometry if g.z in keep))
    return geometry, truth


def _render(spec: CohortSpec, rng, geometries):
    nx, ny, nz = spec.dims
    psi = rng.uniform(0.0, 2.0 * math.pi)
    gx = np.linspace(-1.0, 1.0, nx)[None, :]
    gy = np.linspace(-1.0, 1.0, ny)[:, None]
    bg = spec.background_mean + spec.background_gradient * (math.cos(psi) * gx + math.sin(psi) * gy)
    data = np.repeat(bg[None, :, :], nz, axis=0).astype(np.float64)
    ss = int(spec.supersample)
    for geometry in geometries:
        for st in geometry:
            reach = st.wall.max_radius + 2.0
            x0 = max(int(math.floor(st.center[0] - reach)), 0)
            y0 = max(int(math.floor(st.center[1] - reach)), 0)
            x1 = min(int(math.ceil(st.center[0] + reach)), nx - 1)
            y1 = min(int(math.ceil(st.center[1] + reach)), ny - 1)
            w, h = x1 - x0 + 1, y1 - y0 + 1
            f_wall = kernels.ellipse_coverage(float(x0), float(y0), w, h, st.center[0], st.center[1],
                                              st.wall.a, st.wall.b, st.wall.phi, ss)
            f_lumen = kernels.ellipse_coverage(float(x0), float(y0), w, h, st.center[0], st.center[1],
                                               st.lumen.a, st.lumen.b, st.lumen.phi, ss)
            patch = data[st.z, y0:y1 + 1, x0:x1 + 1]
            patch[:] = (patch * (1.0 - f_wall) + spec.wall_mean * (f_wall - f_lumen)
                        + spec.lumen_mean * f_lumen)
    if spec.texture_sigma > 0:
        data += rng.normal(0.0, spec.texture_sigma, size=data.shape)
    return data.astype(np.float32)


def generate_participant(spec: CohortSpec, index):
    """One participant: its volume and the ground truth of each of its vessels."""
    rng = _participant_rng(spec.seed, index)
    pid = participant_id(index)
    geometries, truths = [], []
    for slot, vid in enumerate(vessel_ids(spec.vessels_per_participant)):
        geometry, truth = _sample_vessel(spec, rng, pid, vid, slot)
        geometries.append(geometry)
        truths.append(truth)
    volume = Volume(_render(spec, rng, geometries), spec.spacing)
    return volume, truths


def generate_cohort(spec: CohortSpec):
    """Deterministic list of ``(Volume, [VesselTruth, ...])``, one per participant."""
    return [generate_participant(spec, i) for i in range(spec.n_participants)]


def write_truth(t: VesselTruth, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(t.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_truth(path) -> VesselTruth:
    with open(path, encoding="utf-8") as fh:
        return VesselTruth.from_json(json.load(fh))
