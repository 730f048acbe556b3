"""Threshold-crossing reference predictor.

Works on the centre slice of a polar patch: a ray starts in the dark lumen,
crosses up into the bright wall and back down to the background. Rays whose
segments do not look like lumen/wall/background are treated as failures and
filled with the median of the successful rays.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..errors import AllRaysFailed, ShapeMismatch
from ..polar import GRID, ContourPair, PolarPatch

BACKGROUND_RUN = 5


@dataclass(frozen=True)
class OracleConfig:
    lumen_level: float = 0.1
    wall_level: float = 0.7
    background_level: float = 0.4
    smooth: int = 3
    min_width: float = 0.5
    min_rays: int = 8

    def rescaled(self, p5, p95):
        """Levels expressed on the scale of a percentile-normalised volume."""
        span = p95 - p5
        return replace(self,
                       lumen_level=(self.lumen_level - p5) / span,
                       wall_level=(self.wall_level - p5) / span,
                       background_level=(self.background_level - p5) / span)


def _smooth(profiles, width):
    if width <= 1:
        return profiles
    half = width // 2
    padded = np.pad(profiles, ((0, 0), (half, width - 1 - half)), mode="edge")
    kernel = np.ones(width) / width
    return np.stack([np.convolve(row, kernel, mode="valid") for row in padded])


def _nearest(value, levels):
    return int(np.argmin([abs(value - lv) for lv in levels]))


def trace_ray(raw, sm, cfg: OracleConfig):
    """``(lumen radius, outer radius)`` for one ray, or ``None`` when no edge pair is found."""
    t_in = 0.5 * (cfg.lumen_level + cfg.wall_level)
    t_out = 0.5 * (cfg.wall_level + cfg.background_level)
    n = len(sm)
    if sm[0] >= t_in:
        return None
    up = np.flatnonzero(sm >= t_in)
    if up.size == 0:
        return None
    k1 = int(up[0])
    r_in = k1 + (t_in - sm[k1 - 1]) / (sm[k1] - sm[k1 - 1])  # sample k sits at distance k + 1
    k2 = -1
    above = sm[k1] >= t_out
    for k in range(k1 + 1, n):
        if above and sm[k] < t_out:
            k2 = k
            break
        above = above or sm[k] >= t_out
    if k2 < 0:
        return None
    r_out = k2 + (sm[k2 - 1] - t_out) / (sm[k2 - 1] - sm[k2])
    levels = (cfg.lumen_level, cfg.wall_level, cfg.background_level)
    segments = (raw[:k1], raw[k1:k2], raw[k2:k2 + BACKGROUND_RUN])
    for expected, seg in enumerate(segments):
        if seg.size == 0 or _nearest(float(seg.mean()), levels) != expected:
            return None
    return float(r_in), float(r_out)


def oracle_predict(patch: PolarPatch, cfg: OracleConfig = OracleConfig()) -> ContourPair:
    if patch.samples.shape != GRID.shape:
        raise ShapeMismatch(f"expected patch shape {GRID.shape}, got {patch.samples.shape}")
    raw = patch.samples[:, :, GRID.half_slices]
    sm = _smooth(raw, cfg.smooth)
    radii = np.full(GRID.n_angles, np.nan)
    widths = np.full(GRID.n_angles, np.nan)
    for i in range(GRID.n_angles):
        hit = trace_ray(raw[i], sm[i], cfg)
        if hit is not None:
            radii[i] = hit[0]
            widths[i] = max(hit[1] - hit[0], cfg.min_width)
    ok = np.isfinite(radii)
    if ok.sum() < cfg.min_rays:
        raise AllRaysFailed(f"only {int(ok.sum())} of {GRID.n_angles} rays found a lumen/wall edge pair")
    radii[~ok] = np.median(radii[ok])
    widths[~ok] = np.median(widths[ok])
    return ContourPair(patch.center, radii, widths)


class OraclePredictor:
    """Adapter giving the oracle the same call surface as the CNN predictor."""

    kind = "oracle"
    supports_dropout = False

    def __init__(self, cfg: OracleConfig = OracleConfig()):
        self.cfg = cfg

    def for_volume_stats(self, p5, p95):
        return OraclePredictor(self.cfg.rescaled(p5, p95))

    def predict(self, patch, seed=None):
        if seed is not None:
            raise ValueError("the oracle predictor has no dropout mode")
        return oracle_predict(patch, self.cfg)

    def predict_batch(self, patches, seeds=None):
        if seeds is not None:
            raise ValueError("the oracle predictor has no dropout mode")
        return [oracle_predict(p, self.cfg) for p in patches]
