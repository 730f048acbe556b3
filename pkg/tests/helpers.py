"""Small shared builders for tests."""
import numpy as np

from carotid_qa.phantom import CohortSpec, Ellipse, SliceTruth, VesselTruth


def circle_spec(**kw):
    base = dict(n_participants=1, vessels_per_participant=1, annotated_slices_per_vessel=1,
                dims=(64, 64, 8), lumen_radius=(5.0, 5.0), aspect=(1.0, 1.0), wall_thickness=(3.0, 3.0),
                radius_variation=0.0, drift_sigma=0.0, center_jitter=0.0, texture_sigma=0.0,
                background_gradient=0.0)
    base.update(kw)
    return CohortSpec(**base)


def ellipse_truth(a=6.0, b=4.0, phi=0.0, center=(30.0, 30.0), z=3, thickness=3.0):
    st = SliceTruth(z, center, Ellipse(a, b, phi), Ellipse(a + thickness, b + thickness, phi))
    return VesselTruth("P000", "L", (st,))


def spearman(x, y):
    """Spearman rank correlation with average ranks for ties."""
    def rank(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="mergesort")
        r = np.empty(len(v))
        r[order] = np.arange(len(v), dtype=np.float64)
        for val in np.unique(v):
            idx = v == val
            r[idx] = r[idx].mean()
        return r
    rx, ry = rank(x), rank(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = np.sqrt((rx ** 2).sum() * (ry ** 2).sum())
    return float((rx * ry).sum() / den) if den > 0 else 0.0
