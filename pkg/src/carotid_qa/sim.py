"""Noise and centre-offset degradation sweeps over a phantom cohort."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import CarotidQAError, ConfigError
from .phantom import VesselTruth
from .polar import polar_transform
from .qa import (LEVELS, STRUCTURES, QARecord, correlation_table, fmt, score_contour,
                 write_correlation_csv, write_records_csv)
from .uncertainty import EnsembleConfig, aggregate, build_ensemble
from .volume import NoiseSpec, add_noise, preprocess_with_stats

log = logging.getLogger(__name__)

METHOD_MATRIX = ("dropout_mean", "dropout_polar", "centers_polar")
SUMMARY_FIELDS = ["level", "structure", "method", "median_dice", "iqr_dice",
                  "median_uncertainty", "iqr_uncertainty"]


@dataclass(frozen=True)
class CenterOffsetSpec:
    normalized_offset: float

    def __post_init__(self):
        if not (math.isfinite(self.normalized_offset) and self.normalized_offset >= 0):
            raise ConfigError(f"offset must be finite and >= 0, got {self.normalized_offset}")


def farthest_direction(st):
    """Angle in [0, 2pi) of the lumen point farthest from the slice centre, and that distance.

    The two ends of the major axis tie; the smaller angle wins. Circles use 0.
    """
    e = st.lumen
    if e.a == e.b:
        return 0.0, float(e.a)
    axis = e.phi if e.a > e.b else e.phi + 0.5 * math.pi
    ends = sorted(math.fmod(axis + k * math.pi, 2.0 * math.pi) % (2.0 * math.pi) for k in (0, 1))
    return ends[0], float(max(e.a, e.b))


def offset_center(truth: VesselTruth, z, offset):
    """True centre moved ``offset * R*`` towards the farthest lumen point (R* its distance)."""
    spec = CenterOffsetSpec(float(offset))
    st = truth.at(z)
    theta, r_star = farthest_direction(st)
    step = spec.normalized_offset * r_star
    return st.center[0] + step * math.cos(theta), st.center[1] + step * math.sin(theta)


@dataclass
class SweepConfig:
    experiment: str = "noise"
    levels: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    methods: tuple = METHOD_MATRIX
    seed: int = 0
    n_dropout: int = 20
    include_original: bool = True
    normalize: bool = True
    correlate_all_offsets: bool = False

    def __post_init__(self):
        self.levels = tuple(float(x) for x in self.levels)
        self.methods = tuple(self.methods)
        if self.experiment not in ("noise", "offset"):
            raise ConfigError(f"experiment must be 'noise' or 'offset', got {self.experiment!r}")
        if not self.levels:
            raise ConfigError("sweep needs at least one level")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ConfigError("sweep levels must be strictly increasing")
        if self.levels[0] < 0:
            raise ConfigError("sweep levels must be non-negative")
        if self.experiment == "noise" and self.levels[-1] > 1:
            raise ConfigError("noise levels must lie in [0, 1]")
        for m in self.methods:
            if m not in METHOD_MATRIX:
                raise ConfigError(f"unknown method {m!r}; choose from {METHOD_MATRIX}")
        EnsembleConfig(n_dropout=self.n_dropout)

    @classmethod
    def from_dict(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown sweep key: {unknown[0]}")
        return cls(**obj)

    def to_dict(self):
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in fields(self)}


def noise_seed(seed, participant, level_index):
    """Independent noise stream per (participant, level)."""
    return int(np.random.SeedSequence([int(seed), int(participant), int(level_index)]).generate_state(1)[0])


def _for_volume(predictor, stats):
    if hasattr(predictor, "for_volume_stats"):
        return predictor.for_volume_stats(*stats)
    return predictor


@dataclass
class SliceResult:
    single: object  # ContourPair
    aggregated: dict  # method -> AggregatedContour


def segment_slice(v, center, predictor, methods=METHOD_MATRIX, n_dropout=20, base_seed=0,
                  include_original=True, normalize=True) -> SliceResult:
    """Deterministic prediction plus every requested ensemble/aggregation at ``center``."""
    single = predictor.predict(polar_transform(v, center))
    ensembles, out = {}, {}
    for m in methods:
        ens_method, agg = m.split("_")
        if ens_method not in ensembles:
            cfg = EnsembleConfig(ens_method, n_dropout, base_seed, include_original)
            ensembles[ens_method] = build_ensemble(v, center, predictor, cfg)
        out[m] = aggregate(ensembles[ens_method], agg, normalize)
    return SliceResult(single, out)


def records_for_slice(res: SliceResult, truth: VesselTruth, z, condition=""):
    """QA records of the single prediction and each aggregated contour."""
    recs = []
    d = score_contour(res.single, truth, z)
    for s, dv in zip(STRUCTURES, d):
        recs.append(QARecord(truth.participant_id, truth.vessel_id, z, s, dv, 0.0, "single", "none", condition))
    for m, agg in res.aggregated.items():
        d = score_contour(agg, truth, z)
        for s, dv in zip(STRUCTURES, d):
            recs.append(QARecord(truth.participant_id, truth.vessel_id, z, s, dv, agg.mean_uncertainty(s),
                                 agg.ensemble_method, agg.aggregation, condition))
    return recs


def _participant_task(args):
    """All records of one participant at one sweep level (pure given its arguments)."""
    experiment, level, level_index, p_index, volume, truths, predictor, cfg = args
    v, stats = preprocess_with_stats(volume)
    if experiment == "noise" and level > 0:
        v = add_noise(v, NoiseSpec(level, noise_seed(cfg.seed, p_index, level_index)))
    pred = _for_volume(predictor, stats)
    nx, ny, _ = v.dims
    records, dropped = [], []
    for t in truths:
        for z in t.annotated_z:
            if experiment == "noise":
                x, y = t.at(z).center
            else:
                x, y = offset_center(t, z, level)
            if "centers_polar" in cfg.methods and not (1 <= x <= nx - 2 and 1 <= y <= ny - 2):
                dropped.append((t.participant_id, t.vessel_id, z, "centre neighbourhood leaves the plane"))
                continue
            try:
                res = segment_slice(v, (x, y, z), pred, cfg.methods, cfg.n_dropout, cfg.seed,
                                    cfg.include_original, cfg.normalize)
            except CarotidQAError as exc:
                dropped.append((t.participant_id, t.vessel_id, z, f"{type(exc).__name__}: {exc}"))
                continue
            records += records_for_slice(res, t, z, fmt(level))
    return records, dropped


def _summary_rows(level, records, methods):
    rows = []
    for s in STRUCTURES:
        for m in ("single_none",) + tuple(methods):
            sel = [r for r in records if r.structure == s and r.method == m]
            if not sel:
                continue
            d = np.array([r.dice for r in sel])
            u = np.array([r.mean_uncertainty for r in sel])
            rows.append({
                "level": level, "structure": s, "method": m,
                "median_dice": float(np.median(d)), "iqr_dice": float(np.subtract(*np.percentile(d, [75, 25]))),
                "median_uncertainty": float(np.median(u)),
                "iqr_uncertainty": float(np.subtract(*np.percentile(u, [75, 25]))),
            })
    return rows


@dataclass
class SweepReport:
    config: SweepConfig
    records: dict  # level -> [QARecord]
    summary: list
    correlation: list
    dropped: dict = field(default_factory=dict)

    def median(self, method, structure, key="median_dice"):
        """Per-level series of a summary column for one method and structure."""
        return [next(r[key] for r in self.summary
                     if r["level"] == lv and r["method"] == method and r["structure"] == structure)
                for lv in self.config.levels]

    def r_squared(self, method, structure):
        return {r["level"]: r["r_squared"] for r in self.correlation
                if r["method"] == method and r["structure"] == structure}

    def manifest(self, files=()):
        cfg = self.config
        return {
            "experiment": cfg.experiment,
            "config": cfg.to_dict(),
            "levels": [
                {
                    "index": i,
                    "level": lv,
                    "records": len(self.records[lv]),
                    "dropped": len(self.dropped.get(lv, [])),
                    "outside_lumen": cfg.experiment == "offset" and lv > 1.0,
                    "in_correlation": lv in self._correlated_levels(),
                }
                for i, lv in enumerate(cfg.levels)
            ],
            "correlation_levels": list(LEVELS),
            "files": list(files),
        }

    def _correlated_levels(self):
        cfg = self.config
        if cfg.experiment == "offset" and not cfg.correlate_all_offsets:
            return [lv for lv in cfg.levels if lv < 1.0]
        return list(cfg.levels)

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = []
        for i, lv in enumerate(self.config.levels):
            name = f"records_{self.config.experiment}_{i:02d}.csv"
            write_records_csv(self.records[lv], out / name)
            files.append(name)
        name = f"summary_{self.config.experiment}.csv"
        write_summary_csv(self.summary, out / name)
        files.append(name)
        name = f"correlation_{self.config.experiment}.csv"
        write_correlation_csv(self.correlation, out / name)
        files.append(name)
        with open(out / f"sweep_{self.config.experiment}.json", "w", encoding="utf-8") as fh:
            json.dump(self.manifest(files), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return out


def write_summary_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(SUMMARY_FIELDS)
        for r in rows:
            w.writerow([fmt(r["level"]), r["structure"], r["method"], fmt(r["median_dice"]), fmt(r["iqr_dice"]),
                        fmt(r["median_uncertainty"]), fmt(r["iqr_uncertainty"])])


def run_sweep(cohort, predictor, cfg: SweepConfig, jobs=1) -> SweepReport:
    """Segment every annotated slice of ``cohort`` at each level and score it.

    ``cohort`` is a list of ``(Volume, [VesselTruth, ...])``. Work is split by
    (level, participant); results are merged in that order whatever ``jobs`` is.
    """
    tasks = [(cfg.experiment, lv, li, pi, vol, truths, predictor, cfg)
             for li, lv in enumerate(cfg.levels) for pi, (vol, truths) in enumerate(cohort)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_participant_task, tasks))
    else:
        results = [_participant_task(t) for t in tasks]
    records = {lv: [] for lv in cfg.levels}
    dropped = {lv: [] for lv in cfg.levels}
    for (_, lv, *_), (recs, drops) in zip(tasks, results):
        records[lv] += recs
        dropped[lv] += drops
    for lv in cfg.levels:
        if dropped[lv]:
            log.warning("%s level %s: dropped %d slice(s)", cfg.experiment, fmt(lv), len(dropped[lv]))
    summary = [row for lv in cfg.levels for row in _summary_rows(lv, records[lv], cfg.methods)]
    report = SweepReport(cfg, records, summary, [], dropped)
    pooled = [r for lv in report._correlated_levels() for r in records[lv]]
    report.correlation = correlation_table(pooled, cfg.methods, cfg.experiment)
    return report


def run_noise_sweep(cohort, predictor, cfg: SweepConfig = None, jobs=1) -> SweepReport:
    cfg = cfg or SweepConfig("noise")
    if cfg.experiment != "noise":
        raise ConfigError("run_noise_sweep needs a noise sweep config")
    return run_sweep(cohort, predictor, cfg, jobs)


def run_offset_sweep(cohort, predictor, cfg: SweepConfig = None, jobs=1) -> SweepReport:
    cfg = cfg or SweepConfig("offset", tuple(round(0.1 * i, 1) for i in range(16)))
    if cfg.experiment != "offset":
        raise ConfigError("run_offset_sweep needs an offset sweep config")
    return run_sweep(cohort, predictor, cfg, jobs)
