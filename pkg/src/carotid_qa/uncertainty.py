"""Contour ensembles (dropout samples, jittered centres) and their fusion.

Both fusions return a per-ray output distance and an uncertainty that is, by
default, divided by that distance so it is scale free.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import CenterOutsideMember, ConfigError, DegenerateFit, MixedGeometry
from .polar import ANGLES, GRID, ContourPair, point_in_polygon, polar_transform, rays_to_points
from .volume import Volume

METHODS = ("dropout", "centers")
AGGREGATIONS = ("mean", "polar")
NEIGHBOR_OFFSETS = tuple((dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dx, dy) != (0, 0))
RIDGE = 1e-8
WINDOW = np.pi / 32


@dataclass(frozen=True)
class EnsembleConfig:
    method: str = "dropout"
    n_dropout: int = 20
    base_seed: int = 0
    include_original: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"ensemble method must be one of {METHODS}, got {self.method!r}")
        if int(self.n_dropout) < 2:
            raise ConfigError(f"n_dropout must be >= 2, got {self.n_dropout}")

    @classmethod
    def from_dict(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown ensemble key: {unknown[0]}")
        return cls(**obj)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class ContourEnsemble:
    reference_center: tuple
    members: tuple  # ContourPair
    tags: tuple  # dropout seed, or (dx, dy) centre offset
    method: str = "dropout"

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError(f"an ensemble needs at least 2 members, got {len(self.members)}")
        if len(self.tags) != len(self.members):
            raise ValueError("one tag per member required")
        z = self.reference_center[2]
        if any(m.center[2] != z for m in self.members):
            raise ValueError("ensemble members must share the reference slice")

    def distances(self, structure):
        """``(members, 31)`` per-ray distances of the lumen or outer-wall contour."""
        if structure == "lumen":
            return np.stack([m.lumen_radii for m in self.members])
        if structure == "wall":
            return np.stack([m.outer_radii for m in self.members])
        raise ValueError(f"unknown structure {structure!r}")


def build_ensemble(v: Volume, center, predictor, cfg: EnsembleConfig = EnsembleConfig()) -> ContourEnsemble:
    """Sample an ensemble around ``center = (x, y, z)`` on a preprocessed volume."""
    center = (float(center[0]), float(center[1]), int(center[2]))
    if cfg.method == "dropout":
        if not getattr(predictor, "supports_dropout", False):
            raise ConfigError(f"predictor {getattr(predictor, 'kind', '?')!r} has no dropout mode")
        seeds = [cfg.base_seed + i for i in range(cfg.n_dropout)]
        members = predictor.predict_dropout(polar_transform(v, center), seeds)
        return ContourEnsemble(center, tuple(members), tuple(seeds), "dropout")
    offsets = ([(0, 0)] if cfg.include_original else []) + list(NEIGHBOR_OFFSETS)
    patches = [polar_transform(v, (center[0] + dx, center[1] + dy, center[2])) for dx, dy in offsets]
    members = predictor.predict_batch(patches)
    return ContourEnsemble(center, tuple(members), tuple(offsets), "centers")


@dataclass(frozen=True, eq=False)
class AggregatedContour:
    center: tuple
    lumen_distances: np.ndarray
    wall_distances: np.ndarray
    lumen_uncertainty: np.ndarray
    wall_uncertainty: np.ndarray
    ensemble_method: str
    aggregation: str
    fits: dict = field(default_factory=dict, repr=False)  # structure -> PolarFitModel

    def __post_init__(self):
        for name in ("lumen_distances", "wall_distances", "lumen_uncertainty", "wall_uncertainty"):
            a = np.asarray(getattr(self, name), dtype=np.float64).copy()
            if a.shape != (GRID.n_angles,) or not np.all(np.isfinite(a)):
                raise DegenerateFit(f"{name} must be {GRID.n_angles} finite values")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if np.any(self.lumen_distances <= 0) or np.any(self.wall_distances <= 0):
            raise DegenerateFit("aggregated distances must be positive")
        if np.any(self.lumen_uncertainty < 0) or np.any(self.wall_uncertainty < 0):
            raise DegenerateFit("uncertainties must be non-negative")

    @property
    def method(self):
        return f"{self.ensemble_method}_{self.aggregation}"

    def distances(self, structure):
        return self.lumen_distances if structure == "lumen" else self.wall_distances

    def uncertainty(self, structure):
        return self.lumen_uncertainty if structure == "lumen" else self.wall_uncertainty

    def mean_uncertainty(self, structure):
        return float(np.mean(self.uncertainty(structure)))

    def to_json(self, structure):
        return {
            "center": list(self.center),
            "structure": structure,
            "method": self.method,
            "distances": self.distances(structure).tolist(),
            "uncertainties": self.uncertainty(structure).tolist(),
        }


def aggregate_mean(e: ContourEnsemble, normalize=True) -> AggregatedContour:
    """Per-ray mean distance and population standard deviation."""
    c0 = e.members[0].center
    if any(m.center != c0 for m in e.members):
        raise MixedGeometry("mean aggregation needs members that share one centre")
    out = {}
    for s in ("lumen", "wall"):
        d = e.distances(s)
        mean = d.mean(axis=0)
        sd = d.std(axis=0)
        out[s] = (mean, sd / mean if normalize else sd)
    return AggregatedContour(c0, out["lumen"][0], out["wall"][0], out["lumen"][1], out["wall"][1],
                             e.method, "mean")


def polar_basis(theta):
    """Design matrix of the reduced degree-2 model in (sin, cos)."""
    t = np.asarray(theta, dtype=np.float64)
    s, c = np.sin(t), np.cos(t)
    return np.stack([np.ones_like(t), s, c, s * c, s * s], axis=-1)


@dataclass(frozen=True, eq=False)
class PolarFitModel:
    coefficients: np.ndarray
    ridge: float = RIDGE

    def __call__(self, theta):
        return polar_basis(theta) @ self.coefficients

    @classmethod
    def fit(cls, theta, d, ridge=RIDGE):
        """Minimise ``|X c - d|^2 + ridge |c|^2`` via least squares on the augmented system."""
        x = polar_basis(theta)
        k = x.shape[1]
        a = np.vstack([x, np.sqrt(ridge) * np.eye(k)])
        b = np.concatenate([np.asarray(d, dtype=np.float64), np.zeros(k)])
        coef, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
        if rank < k or not np.all(np.isfinite(coef)):
            raise DegenerateFit(f"polar fit has rank {rank} < {k}")
        return cls(coef, ridge)


def _window_residuals(theta, resid, n_angles=GRID.n_angles):
    """Mean |residual| of points within +-pi/32 of each canonical ray, nearest window filling gaps."""
    centers = 2.0 * np.pi * np.arange(n_angles) / n_angles
    gap = np.abs(np.angle(np.exp(1j * (theta[None, :] - centers[:, None]))))
    inside = gap <= WINDOW
    counts = inside.sum(axis=1)
    u = np.where(counts > 0, (inside * np.abs(resid)[None, :]).sum(axis=1) / np.maximum(counts, 1), np.nan)
    filled = np.flatnonzero(counts > 0)
    for i in np.flatnonzero(counts == 0):
        step = np.abs(filled - i)
        step = np.minimum(step, n_angles - step)
        u[i] = u[filled[np.argmin(step)]]
    return u, counts


def aggregate_polar(e: ContourEnsemble, reference_center=None, normalize=True,
                    ridge=RIDGE) -> AggregatedContour:
    """Fit d(theta) to every member vertex about ``reference_center``; uncertainty from residuals."""
    ref = e.reference_center if reference_center is None else tuple(reference_center)
    ref = (float(ref[0]), float(ref[1]), ref[2] if len(ref) > 2 else e.reference_center[2])
    for m, tag in zip(e.members, e.tags):
        if not point_in_polygon(ref, rays_to_points(m.center, m.lumen_radii)):
            raise CenterOutsideMember(f"reference centre {ref[:2]} lies outside member {tag!r}")
    out, fits = {}, {}
    for s in ("lumen", "wall"):
        pts = np.vstack([rays_to_points(m.center, dist) for m, dist in zip(e.members, e.distances(s))])
        dx, dy = pts[:, 0] - ref[0], pts[:, 1] - ref[1]
        theta = np.mod(np.arctan2(dy, dx), 2.0 * np.pi)
        d = np.hypot(dx, dy)
        model = PolarFitModel.fit(theta, d, ridge)
        d_out = model(ANGLES)
        if np.any(d_out <= 0):
            raise DegenerateFit(f"{s} fit gives a non-positive distance")
        u, _ = _window_residuals(theta, d - model(theta))
        out[s] = (d_out, u / d_out if normalize else u)
        fits[s] = model
    return AggregatedContour(ref, out["lumen"][0], out["wall"][0], out["lumen"][1], out["wall"][1],
                             e.method, "polar", fits)


def aggregate(e: ContourEnsemble, aggregation, normalize=True) -> AggregatedContour:
    if aggregation == "mean":
        return aggregate_mean(e, normalize)
    if aggregation == "polar":
        return aggregate_polar(e, normalize=normalize)
    raise ValueError(f"unknown aggregation {aggregation!r}")
