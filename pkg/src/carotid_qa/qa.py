"""Segmentation quality (Dice) and its correlation with uncertainty."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DimensionMismatch, InsufficientGroups, SelfIntersecting
from .phantom import TRUTH_VERTICES, VesselTruth
from .polar import ContourPair, rays_to_points

STRUCTURES = ("lumen", "wall")
LEVELS = ("contour", "vessel", "participant")
RECORD_FIELDS = ["participant_id", "vessel_id", "z", "structure", "ensemble_method",
                 "aggregation", "dice", "mean_uncertainty"]
CORRELATION_FIELDS = ["experiment", "level", "structure", "method", "r_squared"]


def _edges_cross(p):
    """True if two non-adjacent edges of the closed polygon ``p`` properly cross."""
    n = len(p)
    a = p
    b = np.roll(p, -1, axis=0)
    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))  # first and last edge share a vertex
    i, j = i[keep], j[keep]

    def orient(o, u, w):
        return (u[:, 0] - o[:, 0]) * (w[:, 1] - o[:, 1]) - (u[:, 1] - o[:, 1]) * (w[:, 0] - o[:, 0])

    o1 = orient(a[i], b[i], a[j])
    o2 = orient(a[i], b[i], b[j])
    o3 = orient(a[j], b[j], a[i])
    o4 = orient(a[j], b[j], b[i])
    return bool(np.any((o1 * o2 < 0) & (o3 * o4 < 0)))


def is_simple(polygon) -> bool:
    p = np.asarray(polygon, dtype=np.float64)
    if len(p) < 3:
        return False
    return not _edges_cross(p)


def rasterize(polygon, dims, check_simple=True):
    """Binary mask ``(height, width)`` of pixel centres inside ``polygon`` (even-odd rule).

    Pixel ``(i, j)`` has its centre at ``x = i, y = j``.
    """
    p = np.asarray(polygon, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 2 or len(p) < 3:
        raise ValueError("polygon must be an (N, 2) array with N >= 3")
    if check_simple and not is_simple(p):
        raise SelfIntersecting("polygon edges cross")
    width, height = int(dims[0]), int(dims[1])
    return kernels.rasterize(np.ascontiguousarray(p[:, 0]), np.ascontiguousarray(p[:, 1]), width, height)


def dice(mask_a, mask_b) -> float:
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _contour_polygons(predicted):
    """(lumen polygon, outer polygon) for a ContourPair or an AggregatedContour."""
    if isinstance(predicted, ContourPair):
        return (rays_to_points(predicted.center, predicted.lumen_radii),
                rays_to_points(predicted.center, predicted.outer_radii))
    return (rays_to_points(predicted.center, predicted.lumen_distances),
            rays_to_points(predicted.center, predicted.wall_distances))


def score_contour(predicted, truth: VesselTruth, z):
    """Lumen Dice and wall-ring Dice of a prediction against the truth at slice ``z``."""
    st = truth.at(z)
    p_lumen, p_outer = _contour_polygons(predicted)
    t_lumen = st.lumen_polygon(TRUTH_VERTICES)
    t_outer = st.wall_polygon(TRUTH_VERTICES)
    pts = np.vstack([p_lumen, p_outer, t_lumen, t_outer])
    x0 = int(math.floor(pts[:, 0].min())) - 1
    y0 = int(math.floor(pts[:, 1].min())) - 1
    w = int(math.ceil(pts[:, 0].max())) - x0 + 2
    h = int(math.ceil(pts[:, 1].max())) - y0 + 2
    shift = np.array([x0, y0], dtype=np.float64)
    # star polygons from positive radii are simple by construction
    pl = rasterize(p_lumen - shift, (w, h), check_simple=False)
    po = rasterize(p_outer - shift, (w, h), check_simple=False)
    tl = rasterize(t_lumen - shift, (w, h), check_simple=False)
    to = rasterize(t_outer - shift, (w, h), check_simple=False)
    return dice(pl, tl), dice(po & ~pl, to & ~tl)


@dataclass
class QARecord:
    participant_id: str
    vessel_id: str
    z: int
    structure: str
    dice: float
    mean_uncertainty: float
    ensemble_method: str = "dropout"
    aggregation: str = "polar"
    condition: str = ""  # sweep level label; not serialized in per-level CSVs

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ValueError(f"structure must be one of {STRUCTURES}")
        if not 0.0 <= self.dice <= 1.0:
            raise ValueError(f"dice {self.dice} outside [0, 1]")
        if not (math.isfinite(self.mean_uncertainty) and self.mean_uncertainty >= 0):
            raise ValueError("mean uncertainty must be finite and non-negative")

    @property
    def method(self):
        return f"{self.ensemble_method}_{self.aggregation}"


@dataclass
class CorrelationResult:
    level: str
    structure: str
    method: str
    slope: float
    intercept: float
    r_squared: float
    n: int
    zero_variance: bool = False
    points: list = field(default_factory=list, repr=False)


def ols(x, y):
    """Slope, intercept and R^2 of ``y = a + b x``; ``None`` for R^2 when undefined."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    syy = float(np.sum((y - ym) ** 2))
    # decide degeneracy on the raw values; the mean of equal floats need not equal them
    if np.ptp(x) == 0.0:
        return 0.0, float(ym), None
    b = float(np.sum((x - xm) * (y - ym)) / sxx)
    a = float(ym - b * xm)
    if np.ptp(y) == 0.0:
        return b, a, None
    ss_res = float(np.sum((y - (a + b * x)) ** 2))
    return b, a, min(max(1.0 - ss_res / syy, 0.0), 1.0)


def group_key(record: QARecord, level):
    if level == "contour":
        return (record.condition, record.participant_id, record.vessel_id, record.z)
    if level == "vessel":
        return (record.condition, record.participant_id, record.vessel_id)
    if level == "participant":
        return (record.condition, record.participant_id)
    raise ValueError(f"unknown correlation level {level!r}")


def group_points(records, level):
    """Ordered ``(mean uncertainty, mean dice)`` per group at ``level``."""
    groups = {}
    for r in records:
        groups.setdefault(group_key(r, level), []).append(r)
    pts = []
    for key in groups:  # insertion order keeps the reduction stable
        rs = groups[key]
        pts.append((float(np.mean([r.mean_uncertainty for r in rs])), float(np.mean([r.dice for r in rs]))))
    return pts


def correlate(records, level) -> CorrelationResult:
    """OLS of Dice on uncertainty at the contour, vessel or participant level.

    Records must share one structure and one method. Degenerate inputs (all
    uncertainties or all Dice values equal) give ``r_squared = 0`` with
    ``zero_variance`` set.
    """
    records = list(records)
    if not records:
        raise InsufficientGroups("no records")
    structures = {r.structure for r in records}
    methods = {r.method for r in records}
    if len(structures) != 1 or len(methods) != 1:
        raise ValueError("correlate expects records of a single structure and method")
    pts = group_points(records, level)
    if len(pts) < 2:
        raise InsufficientGroups(f"need at least 2 groups at {level} level, got {len(pts)}")
    u = [p[0] for p in pts]
    d = [p[1] for p in pts]
    b, a, r2 = ols(u, d)
    return CorrelationResult(level, structures.pop(), methods.pop(), b, a,
                             0.0 if r2 is None else r2, len(pts), r2 is None, pts)


def correlation_table(records, methods, experiment=""):
    """Table-shaped rows (level x structure x method) as dicts.

    A cell with fewer than two groups gets ``r_squared = nan`` instead of
    aborting the whole table.
    """
    rows = []
    for level in LEVELS:
        for structure in STRUCTURES:
            for method in methods:
                sel = [r for r in records if r.structure == structure and r.method == method]
                try:
                    res = correlate(sel, level)
                    r2 = res.r_squared
                except InsufficientGroups:  # keep the table shape; the cell is undefined
                    res, r2 = None, math.nan
                rows.append({"experiment": experiment, "level": level, "structure": structure,
                             "method": method, "r_squared": r2, "result": res})
    return rows


def fmt(x):
    """Stable text form for floats in CSV artifacts."""
    return format(float(x), ".10g")


def write_records_csv(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([r.participant_id, r.vessel_id, r.z, r.structure, r.ensemble_method,
                        r.aggregation, fmt(r.dice), fmt(r.mean_uncertainty)])


def read_records_csv(path, condition=""):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [QARecord(r["participant_id"], r["vessel_id"], int(r["z"]), r["structure"],
                     float(r["dice"]), float(r["mean_uncertainty"]), r["ensemble_method"],
                     r["aggregation"], condition) for r in rows]


def write_correlation_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(CORRELATION_FIELDS)
        for r in rows:
            w.writerow([r["experiment"], r["level"], r["structure"], r["method"], fmt(r["r_squared"])])


def read_correlation_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [dict(r, r_squared=float(r["r_squared"])) for r in csv.DictReader(fh)]
