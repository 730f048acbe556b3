import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carotid_qa.errors import CenterOutsideMember, ConfigError, MixedGeometry
from carotid_qa.polar import GRID, ContourPair, rays_to_points
from carotid_qa.uncertainty import (NEIGHBOR_OFFSETS, RIDGE, ContourEnsemble, EnsembleConfig, PolarFitModel,
                                    _window_residuals, aggregate, aggregate_mean, aggregate_polar,
                                    build_ensemble, polar_basis)
from carotid_qa.volume import Volume

ANG = 2 * np.pi * np.arange(31) / 31


def pair(center, r, w=2.0):
    return ContourPair(center, np.broadcast_to(r, 31).astype(float), np.broadcast_to(w, 31).astype(float))


def random_ensemble(rng, n=None, centers=False):
    n = n or int(rng.integers(3, 12))
    c = (float(rng.uniform(20, 40)), float(rng.uniform(20, 40)), 3)
    base = rng.uniform(4, 8)
    members, tags = [], []
    for i in range(n):
        cc = (c[0] + rng.uniform(-1, 1), c[1] + rng.uniform(-1, 1), 3) if centers else c
        r = base * (1 + 0.2 * np.cos(ANG - rng.uniform(0, 6))) + rng.normal(0, 0.3, 31)
        members.append(ContourPair(cc, r, rng.uniform(1.5, 3, 31)))
        tags.append(i)
    return ContourEnsemble(c, tuple(members), tuple(tags), "centers" if centers else "dropout")


def normal_equations(theta, d, ridge=RIDGE):
    s, c = np.sin(theta), np.cos(theta)
    x = np.column_stack([np.ones_like(s), s, c, s * c, s * s])
    return np.linalg.solve(x.T @ x + ridge * np.eye(5), x.T @ d)


def test_polar_matches_normal_equations_oracle_on_100_ensembles():
    rng = np.random.default_rng(0)
    for k in range(100):
        e = random_ensemble(rng, centers=bool(k % 2))
        agg = aggregate_polar(e)
        ref = e.reference_center
        for s in ("lumen", "wall"):
            pts = np.vstack([rays_to_points(m.center, d) for m, d in zip(e.members, e.distances(s))])
            dx, dy = pts[:, 0] - ref[0], pts[:, 1] - ref[1]
            theta = np.mod(np.arctan2(dy, dx), 2 * np.pi)
            coef = normal_equations(theta, np.hypot(dx, dy))
            assert np.max(np.abs(agg.fits[s].coefficients - coef)) < 1e-8
            s_, c_ = np.sin(ANG), np.cos(ANG)
            expect = coef[0] + coef[1] * s_ + coef[2] * c_ + coef[3] * s_ * c_ + coef[4] * s_ * s_
            assert np.max(np.abs(agg.distances(s) - expect)) < 1e-8


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.2, 5.0))
def test_normalized_uncertainty_scale_invariant(seed, k):
    rng = np.random.default_rng(seed)
    e = random_ensemble(rng, centers=True)
    c = e.reference_center
    # scale every member about the reference centre
    scaled = tuple(ContourPair((c[0] + k * (m.center[0] - c[0]), c[1] + k * (m.center[1] - c[1]), 3),
                               k * m.lumen_radii, k * m.wall_widths) for m in e.members)
    e2 = ContourEnsemble(c, scaled, e.tags, e.method)
    for agg in ("mean", "polar"):
        if agg == "mean":
            # mean aggregation needs one shared centre
            e_ = ContourEnsemble(c, tuple(pair(c, m.lumen_radii, m.wall_widths) for m in e.members), e.tags)
            e2_ = ContourEnsemble(c, tuple(pair(c, k * m.lumen_radii, k * m.wall_widths) for m in e.members), e.tags)
        else:
            e_, e2_ = e, e2
        a, b = aggregate(e_, agg), aggregate(e2_, agg)
        for s in ("lumen", "wall"):
            assert np.max(np.abs(a.uncertainty(s) - b.uncertainty(s))) < 1e-9
            assert np.allclose(k * a.distances(s), b.distances(s), rtol=1e-9)


def test_circle_ensemble_has_zero_uncertainty():
    c = (30.0, 30.0, 3)
    e = ContourEnsemble(c, tuple(pair(c, 5.0) for _ in range(4)), tuple(range(4)))
    for agg in ("mean", "polar"):
        out = aggregate(e, agg)
        assert np.allclose(out.lumen_distances, 5.0, atol=1e-6)
        assert np.max(out.lumen_uncertainty) < 1e-6


def test_mean_two_member_example():
    c = (30.0, 30.0, 3)
    e = ContourEnsemble(c, (pair(c, 2.0, 1.0), pair(c, 4.0, 1.0)), (0, 1))
    raw = aggregate_mean(e, normalize=False)
    assert np.allclose(raw.lumen_distances, 3.0) and np.allclose(raw.lumen_uncertainty, 1.0)
    assert np.allclose(aggregate_mean(e).lumen_uncertainty, 1 / 3)
    # outer wall distances are 3 and 5
    assert np.allclose(raw.wall_distances, 4.0) and np.allclose(raw.wall_uncertainty, 1.0)


def test_mean_rejects_mixed_centres():
    e = ContourEnsemble((30.0, 30.0, 3), (pair((30.0, 30.0, 3), 5), pair((31.0, 30.0, 3), 5)), (0, 1), "centers")
    with pytest.raises(MixedGeometry):
        aggregate_mean(e)


def test_polar_reference_outside_member():
    e = ContourEnsemble((30.0, 30.0, 3), (pair((30.0, 30.0, 3), 5), pair((40.0, 30.0, 3), 3)), (0, 1), "centers")
    with pytest.raises(CenterOutsideMember):
        aggregate_polar(e)


def test_rotating_members_rotates_output():
    rng = np.random.default_rng(3)
    c = (30.0, 30.0, 3)
    members = [ContourPair(c, 5 + rng.normal(0, 0.2, 31), np.full(31, 2.0)) for _ in range(6)]
    a = aggregate_polar(ContourEnsemble(c, tuple(members), tuple(range(6))))
    rolled = [ContourPair(c, np.roll(m.lumen_radii, 3), m.wall_widths) for m in members]
    b = aggregate_polar(ContourEnsemble(c, tuple(rolled), tuple(range(6))))
    # the 5-term basis is not rotation closed, so compare the residual scale rather than per-ray values
    assert a.mean_uncertainty("lumen") == pytest.approx(b.mean_uncertainty("lumen"), rel=0.3)
    m = aggregate_mean(ContourEnsemble(c, tuple(members), tuple(range(6))))
    mr = aggregate_mean(ContourEnsemble(c, tuple(rolled), tuple(range(6))))
    assert np.allclose(np.roll(m.lumen_uncertainty, 3), mr.lumen_uncertainty)


def test_window_counts_for_shared_centre():
    theta = np.tile(ANG, 20)
    u, counts = _window_residuals(theta, np.ones_like(theta))
    assert np.all(counts == 20) and np.allclose(u, 1.0)


def test_empty_window_copies_nearest():
    theta = np.array([ANG[0], ANG[10]])
    u, counts = _window_residuals(theta, np.array([1.0, 3.0]))
    assert counts[0] == 1 and counts[5] == 0
    assert u[5] == 1.0 and u[6] == 3.0 and u[30] == 1.0


def test_basis_and_fit_recovers_exact_curve():
    coef = np.array([5.0, 0.3, -0.2, 0.1, 0.4])
    theta = np.linspace(0, 2 * np.pi, 200, endpoint=False)
    fit = PolarFitModel.fit(theta, polar_basis(theta) @ coef)
    assert np.allclose(fit.coefficients, coef, atol=1e-6)


class FakePredictor:
    supports_dropout = True

    def predict_dropout(self, patch, seeds):
        return [pair(patch.center, 5.0 + 0.01 * s) for s in seeds]

    def predict_batch(self, patches):
        return [pair(p.center, 5.0) for p in patches]


def test_build_ensemble_members():
    v = Volume(np.zeros((8, 64, 64), np.float32))
    d = build_ensemble(v, (30, 30, 3), FakePredictor(), EnsembleConfig("dropout", n_dropout=5, base_seed=10))
    assert d.tags == (10, 11, 12, 13, 14) and len(d.members) == 5
    c = build_ensemble(v, (30, 30, 3), FakePredictor(), EnsembleConfig("centers"))
    assert len(c.members) == 9 and c.tags[0] == (0, 0) and set(c.tags[1:]) == set(NEIGHBOR_OFFSETS)
    c8 = build_ensemble(v, (30, 30, 3), FakePredictor(), EnsembleConfig("centers", include_original=False))
    assert len(c8.members) == 8


def test_config_validation():
    with pytest.raises(ConfigError):
        EnsembleConfig(n_dropout=1)
    with pytest.raises(ConfigError):
        EnsembleConfig("bootstrap")
    with pytest.raises(ConfigError):
        EnsembleConfig.from_dict({"n_dropot": 3})
