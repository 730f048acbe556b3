import filecmp
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carotid_qa.errors import ConfigError
from carotid_qa.phantom import CohortSpec, generate_cohort
from carotid_qa.polar import point_in_polygon
from carotid_qa.predictor import CNNPredictor, OraclePredictor, PredictorConfig, init_params
from carotid_qa.sim import (METHOD_MATRIX, SweepConfig, farthest_direction, noise_seed, offset_center,
                            run_noise_sweep, run_offset_sweep, run_sweep)

from helpers import ellipse_truth

TINY = CohortSpec(n_participants=2, vessels_per_participant=1, annotated_slices_per_vessel=2, dims=(96, 64, 8),
                  seed=5)


@pytest.fixture(scope="module")
def cohort():
    return generate_cohort(TINY)


@pytest.fixture(scope="module")
def tiny_cnn():
    cfg = PredictorConfig(n_layers=2, channels=3, radial_fov=24)
    return CNNPredictor(cfg, init_params(cfg, 1))


def test_offset_direction_examples():
    assert offset_center(ellipse_truth(5, 5, center=(30, 30)), 3, 0.5) == pytest.approx((32.5, 30.0))
    assert offset_center(ellipse_truth(6, 4, 0.0, center=(30, 30)), 3, 1.0) == pytest.approx((36.0, 30.0))
    # minor axis along x: farthest point straight up
    x, y = offset_center(ellipse_truth(4, 6, 0.0, center=(30, 30)), 3, 0.5)
    assert x == pytest.approx(30.0, abs=1e-12) and y == pytest.approx(33.0)
    theta, r = farthest_direction(ellipse_truth(6, 4, 3 * math.pi / 4).at(3))
    assert theta == pytest.approx(3 * math.pi / 4) and r == 6.0
    assert offset_center(ellipse_truth(), 3, 0.0) == (30.0, 30.0)
    with pytest.raises(ConfigError):
        offset_center(ellipse_truth(), 3, -0.1)


@settings(max_examples=200, deadline=None)
@given(st.floats(3, 9), st.floats(0.6, 1.0), st.floats(0, 2 * math.pi), st.floats(0, 1.5))
def test_offset_linear_and_inside_outside(a, aspect, phi, o):
    t = ellipse_truth(a, a * aspect, phi, center=(40.0, 40.0))
    _, r_star = farthest_direction(t.at(3))
    x, y = offset_center(t, 3, o)
    assert abs(math.hypot(x - 40.0, y - 40.0) - o * r_star) <= 1e-12
    lumen = t.at(3).lumen
    level = lumen.level(x - 40.0, y - 40.0)
    if o < 0.999:
        assert level < 1.0
    elif o > 1.001:
        assert level > 1.0
    if o < 0.95:
        assert point_in_polygon((x, y), t.at(3).lumen_polygon())
    elif o > 1.05:
        assert not point_in_polygon((x, y), t.at(3).lumen_polygon())


def test_noise_seed_streams():
    assert noise_seed(0, 1, 2) == noise_seed(0, 1, 2)
    assert len({noise_seed(0, p, l) for p in range(5) for l in range(6)}) == 30


def test_sweep_config_validation():
    with pytest.raises(ConfigError):
        SweepConfig("noise", (0.0, 0.2, 0.1))
    with pytest.raises(ConfigError):
        SweepConfig("noise", (0.0, 1.5))
    with pytest.raises(ConfigError):
        SweepConfig("drift")
    with pytest.raises(ConfigError):
        SweepConfig(methods=("dropout_median",))
    with pytest.raises(ConfigError):
        SweepConfig.from_dict({"levls": [0]})


def test_oracle_noise_sweep_shape(cohort):
    rep = run_noise_sweep(cohort, OraclePredictor(), SweepConfig("noise", (0.0, 0.2), methods=("centers_polar",)))
    n_slices = sum(len(t.annotated_z) for _, ts in cohort for t in ts)
    # single + centers_polar, two structures each
    assert all(len(rep.records[lv]) == n_slices * 4 for lv in (0.0, 0.2))
    assert len(rep.correlation) == 3 * 1 * 2
    assert len(rep.summary) == 2 * 2 * 2


def test_zero_levels_match_baseline(cohort, tiny_cnn):
    methods = ("dropout_mean", "dropout_polar")
    a = run_noise_sweep(cohort, tiny_cnn, SweepConfig("noise", (0.0, 0.3), methods, n_dropout=3))
    b = run_offset_sweep(cohort, tiny_cnn, SweepConfig("offset", (0.0, 0.5), methods, n_dropout=3))
    key = lambda r: (r.participant_id, r.vessel_id, r.z, r.structure, r.method, r.dice, r.mean_uncertainty)
    assert [key(r) for r in a.records[0.0]] == [key(r) for r in b.records[0.0]]
    assert [key(r) for r in a.records[0.3]] != [key(r) for r in a.records[0.0]]


def test_full_method_matrix_rows(cohort, tiny_cnn):
    rep = run_offset_sweep(cohort, tiny_cnn, SweepConfig("offset", (0.0, 0.5, 1.2), n_dropout=3))
    assert len(rep.correlation) == 3 * len(METHOD_MATRIX) * 2 == 18
    man = rep.manifest()
    assert [lv["outside_lumen"] for lv in man["levels"]] == [False, False, True]
    assert [lv["in_correlation"] for lv in man["levels"]] == [True, True, False]
    allc = run_offset_sweep(cohort, tiny_cnn,
                            SweepConfig("offset", (0.0, 0.5, 1.2), n_dropout=3, correlate_all_offsets=True))
    assert all(lv["in_correlation"] for lv in allc.manifest()["levels"])


def test_reruns_and_jobs_byte_identical(cohort, tiny_cnn, tmp_path):
    cfg = SweepConfig("noise", (0.0, 0.4), ("dropout_polar",), n_dropout=3, seed=9)
    run_sweep(cohort, tiny_cnn, cfg).write(tmp_path / "a")
    run_sweep(cohort, tiny_cnn, cfg).write(tmp_path / "b")
    run_sweep(cohort, tiny_cnn, cfg, jobs=2).write(tmp_path / "c")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(names) == 5
    for other in ("b", "c"):
        match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / other, names, shallow=False)
        assert mismatch == [] and errors == []
