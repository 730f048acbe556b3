"""Acceptance criteria, one test each.

Every test stores ``(passed, detail)`` in ``conftest.ACCEPTANCE`` before
asserting, and the terminal summary prints one PASS/FAIL line per criterion.
Criteria 5 to 9 share one trained CNN and two sweeps over the default
evaluation cohort (session fixtures, several minutes on one core).
"""
import filecmp
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from carotid_qa.cli import main
from carotid_qa.config import RunConfig
from carotid_qa.phantom import Ellipse, generate_cohort
from carotid_qa.polar import GRID, ContourPair, contours_to_cartesian, polar_transform, polygon_to_radii
from carotid_qa.predictor import CNNPredictor, OraclePredictor, grad_check, read_weights
from carotid_qa.qa import dice, rasterize, score_contour
from carotid_qa.sim import run_sweep
from carotid_qa.uncertainty import ContourEnsemble, aggregate, aggregate_polar
from carotid_qa.volume import Volume, preprocess_with_stats

from conftest import ACCEPTANCE, CONFIGS
from helpers import spearman
from pipeline import artifact_files
from test_uncertainty import normal_equations, random_ensemble

pytestmark = pytest.mark.acceptance

NOISE_LEVELS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
OFFSET_LEVELS = tuple(round(0.1 * i, 1) for i in range(10))


def record(k, ok, detail):
    ACCEPTANCE[k] = (bool(ok), detail)
    assert ok, detail


# shared heavy fixtures ---------------------------------------------------------

@pytest.fixture(scope="session")
def default_cfg(tmp_path_factory):
    cfg = RunConfig.load(CONFIGS / "default.json")
    cfg.output_dir = tmp_path_factory.mktemp("default")
    return cfg


@pytest.fixture(scope="session")
def trained(default_cfg):
    cfg_path = CONFIGS / "default.json"
    t0 = time.perf_counter()
    code = main(["train", "--config", str(cfg_path), "--out", str(default_cfg.output_dir), "-q"])
    seconds = time.perf_counter() - t0
    assert code == 0
    info = json.loads((default_cfg.model_dir / "model.json").read_text())
    model = CNNPredictor(default_cfg.predictor, read_weights(default_cfg.weights_path))
    return {"seconds": seconds, "info": info, "model": model}


@pytest.fixture(scope="session")
def eval_cohort(default_cfg):
    return generate_cohort(default_cfg.cohort)


@pytest.fixture(scope="session")
def noise_report(default_cfg, trained, eval_cohort):
    cfg = replace(default_cfg.sweep_noise, levels=NOISE_LEVELS)
    return run_sweep(eval_cohort, trained["model"], cfg)


@pytest.fixture(scope="session")
def offset_report(default_cfg, trained, eval_cohort):
    cfg = replace(default_cfg.sweep_offset, levels=OFFSET_LEVELS)
    return run_sweep(eval_cohort, trained["model"], cfg)


# criteria ----------------------------------------------------------------------

def test_c01_geometry_roundtrip():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        center = (float(rng.uniform(20, 300)), float(rng.uniform(20, 140)), 5)
        c = ContourPair(center, rng.uniform(0.5, 15, 31), rng.uniform(0.2, 6, 31))
        lumen, wall = contours_to_cartesian(c)
        r = polygon_to_radii(lumen, center[:2])
        outer = polygon_to_radii(wall, center[:2])
        worst = max(worst, float(np.max(np.abs(r - c.lumen_radii))),
                    float(np.max(np.abs(outer - r - c.wall_widths))))
    record(1, worst <= 1e-9, f"max radius error {worst:.2e} over 1000 contour pairs (tol 1e-9)")


def test_c02_polar_patch_fields():
    nz, ny, nx = 9, 80, 90
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    center = (44.3, 39.7, 4)
    const = polar_transform(Volume(np.full((nz, ny, nx), 0.4, np.float32)), center).samples
    lin_vol = Volume((0.01 * x + 0.02 * y + 0.5 * z).astype(np.float32))
    lin = polar_transform(lin_vol, center).samples
    # exact linear field evaluated at every sample position in float64
    k = np.arange(1, GRID.n_radii + 1)
    px = np.clip(center[0] + np.cos(GRID.angles)[:, None] * k, 0, nx - 1)
    py = np.clip(center[1] + np.sin(GRID.angles)[:, None] * k, 0, ny - 1)
    zs = center[2] - GRID.half_slices + np.arange(GRID.n_slices)
    expect = (0.01 * px + 0.02 * py)[:, :, None] + 0.5 * zs[None, None, :]
    # reference uses the float32-stored field values, hence the 1e-6 tolerance
    lin_err = float(np.max(np.abs(lin - expect)))
    const_err = float(np.max(np.abs(const - np.float32(0.4))))
    ok = const.shape == (31, 127, 7) and lin.shape == (31, 127, 7) and const_err == 0.0 and lin_err <= 1e-6
    record(2, ok, f"shape {const.shape}, constant-field spread {const_err:.1e}, linear-field error {lin_err:.1e} "
                  "(tol 1e-6)")


def test_c03_grad_check():
    t0 = time.perf_counter()
    rep = grad_check()
    secs = time.perf_counter() - t0
    record(3, rep.max_rel_error < 1e-4 and secs < 10,
           f"max relative error {rep.max_rel_error:.2e} on {rep.n_params} parameters (tol 1e-4), {secs:.1f} s (< 10 s)")


def test_c04_oracle_quality(default_cfg):
    t0 = time.perf_counter()
    cohort = generate_cohort(replace(default_cfg.cohort, n_participants=10))
    scores = []
    for vol, truths in cohort:
        v, stats = preprocess_with_stats(vol)
        pred = OraclePredictor().for_volume_stats(*stats)
        for t in truths:
            for z in t.annotated_z:
                c = pred.predict(polar_transform(v, (*t.at(z).center, z)))
                scores.append(score_contour(c, t, z))
    secs = time.perf_counter() - t0
    lum, wall = np.median(np.array(scores), axis=0)
    record(4, lum >= 0.95 and wall >= 0.90 and secs < 60,
           f"median Dice lumen {lum:.3f} (>= 0.95), wall {wall:.3f} (>= 0.90), {len(scores)} slices, {secs:.1f} s")


def test_c05_trained_cnn(default_cfg, trained):
    info = trained["info"]
    ok = (info["val_median_dice_lumen"] >= 0.85 and trained["seconds"] < 15 * 60
          and default_cfg.train.epochs <= 50 and default_cfg.dataset.n_patches <= 2000)
    record(5, ok, f"validation median Dice lumen {info['val_median_dice_lumen']:.3f} (>= 0.85), wall "
                  f"{info['val_median_dice_wall']:.3f}; {default_cfg.dataset.n_patches} patches, "
                  f"{default_cfg.train.epochs} epochs, {trained['seconds'] / 60:.1f} min (< 15)")


def test_c06_non_degradation(noise_report):
    recs = noise_report.records[0.0]
    parts, ok = [], True
    for s in ("lumen", "wall"):
        mean = {m: float(np.mean([r.dice for r in recs if r.structure == s and r.method == m]))
                for m in ("single_none", "dropout_mean", "dropout_polar")}
        ok &= min(mean["dropout_mean"], mean["dropout_polar"]) >= mean["single_none"] - 0.01
        parts.append(f"{s}: single {mean['single_none']:.3f}, mean {mean['dropout_mean']:.3f}, "
                     f"polar {mean['dropout_polar']:.3f}")
    record(6, ok, "; ".join(parts) + " (aggregated >= single - 0.01)")


def test_c07_noise_monotonicity(noise_report):
    parts, ok = [], True
    for s in ("lumen", "wall"):
        d = noise_report.median("dropout_polar", s)
        u = noise_report.median("dropout_polar", s, "median_uncertainty")
        rd, ru = spearman(NOISE_LEVELS, d), spearman(NOISE_LEVELS, u)
        ok &= rd <= -0.8 and ru >= 0.8
        parts.append(f"{s}: rho(Dice) {rd:+.2f}, rho(unc) {ru:+.2f}")
    record(7, ok, "; ".join(parts) + " (need <= -0.8 and >= +0.8)")


def test_c08_offset_behaviour(offset_report):
    parts, ok = [], True
    for s in ("lumen", "wall"):
        d = offset_report.median("dropout_polar", s)
        u = offset_report.median("dropout_polar", s, "median_uncertainty")
        rd, ru = spearman(OFFSET_LEVELS, d), spearman(OFFSET_LEVELS, u)
        ok &= rd <= -0.8 and ru >= 0.8
        # step-to-step monotonicity is reported only; the trend is judged by rank correlation
        ups = sum(b > a for a, b in zip(d, d[1:]))
        parts.append(f"{s}: rho(Dice) {rd:+.2f}, rho(unc) {ru:+.2f}, Dice upticks {ups}")
    flags = offset_report.manifest()["levels"]
    restricted = all(f["in_correlation"] == (f["level"] < 1.0) for f in flags)
    ok &= restricted
    record(8, ok, "; ".join(parts) + f" (need <= -0.8 and >= +0.8); offsets < 1 only in correlation: {restricted}")


def _level_order(report, tag):
    parts, ok = [], True
    for s in ("lumen", "wall"):
        r2 = report.r_squared("dropout_polar", s)
        c, v, p = r2["contour"], r2["vessel"], r2["participant"]
        good = p >= v and v >= c - 0.05
        ok &= good
        parts.append(f"{tag} {s}: P {p:.2f} V {v:.2f} C {c:.2f}")
    return ok, parts


def test_c09_level_ordering(noise_report, offset_report):
    ok_n, pn = _level_order(noise_report, "noise")
    ok_o, po = _level_order(offset_report, "offset")
    record(9, ok_n and ok_o, "; ".join(pn + po) + " (need P >= V >= C - 0.05)")


def test_c10_aggregation_oracle():
    rng = np.random.default_rng(10)
    coef_err = out_err = 0.0
    for k in range(100):
        e = random_ensemble(rng, centers=bool(k % 2))
        agg = aggregate_polar(e)
        ref = e.reference_center
        for s in ("lumen", "wall"):
            from carotid_qa.polar import rays_to_points
            pts = np.vstack([rays_to_points(m.center, d) for m, d in zip(e.members, e.distances(s))])
            dx, dy = pts[:, 0] - ref[0], pts[:, 1] - ref[1]
            theta = np.mod(np.arctan2(dy, dx), 2 * np.pi)
            coef = normal_equations(theta, np.hypot(dx, dy))
            sa, ca = np.sin(GRID.angles), np.cos(GRID.angles)
            expect = coef[0] + coef[1] * sa + coef[2] * ca + coef[3] * sa * ca + coef[4] * sa * sa
            coef_err = max(coef_err, float(np.max(np.abs(agg.fits[s].coefficients - coef))))
            out_err = max(out_err, float(np.max(np.abs(agg.distances(s) - expect))))
    scale_err = 0.0
    for k in range(100):
        e = random_ensemble(rng, centers=True)
        f = float(rng.uniform(0.2, 5.0))
        c = e.reference_center
        scaled = tuple(ContourPair((c[0] + f * (m.center[0] - c[0]), c[1] + f * (m.center[1] - c[1]), c[2]),
                                   f * m.lumen_radii, f * m.wall_widths) for m in e.members)
        a, b = aggregate(e, "polar"), aggregate(ContourEnsemble(c, scaled, e.tags, e.method), "polar")
        for s in ("lumen", "wall"):
            scale_err = max(scale_err, float(np.max(np.abs(a.uncertainty(s) - b.uncertainty(s)))))
    ok = coef_err <= 1e-8 and out_err <= 1e-8 and scale_err <= 1e-9
    record(10, ok, f"coefficient error {coef_err:.1e}, output error {out_err:.1e} (tol 1e-8); "
                   f"scaling change in normalised uncertainty {scale_err:.1e} (tol 1e-9)")


def test_c11_raster_and_dice():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        a, b = sorted(rng.uniform(15, 45, 2), reverse=True)
        el = Ellipse(float(a), float(b), float(rng.uniform(0, np.pi)))
        cx, cy = rng.uniform(55, 73, 2)
        area = rasterize(el.polygon((cx, cy)), (128, 128)).sum()
        # Monte Carlo oracle on the exact ellipse over its bounding box
        pts = rng.uniform(-a, a, (1_000_000, 2))
        mc = 4 * a * a * np.mean(el.level(pts[:, 0], pts[:, 1]) <= 1.0)
        worst = max(worst, abs(area - mc) / mc)
    sym_ok = True
    for _ in range(1000):
        shape = tuple(rng.integers(1, 30, 2))
        m1 = rng.random(shape) < rng.random()
        m2 = rng.random(shape) < rng.random()
        sym_ok &= dice(m1, m2) == dice(m2, m1) and dice(m1, m1) == 1.0
    record(11, worst <= 0.02 and sym_ok,
           f"max relative area error {worst:.2%} over 50 ellipses (tol 2%); dice symmetric and dice(A,A)=1 on "
           f"1000 masks: {sym_ok}")


def test_c12_determinism(smoke_runs):
    a, b = smoke_runs["dirs"]
    names = artifact_files(a)
    same = names == artifact_files(b)
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    ok = same and not mismatch and not errors and len(match) == len(names) > 0
    record(12, ok, f"{len(match)}/{len(names)} CSV/JSON/SVG artifacts byte-identical across two smoke runs"
                   + (f"; differing: {mismatch + errors}" if mismatch or errors else ""))
