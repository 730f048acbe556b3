"""Supervised polar patches cut from a phantom cohort around jittered centres."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import EmptyDataset
from ..phantom import ray_ellipse_distance, truth_radii
from ..polar import polar_transform
from ..volume import NoiseSpec, add_noise, preprocess


@dataclass(frozen=True)
class PatchSample:
    patch: object  # PolarPatch
    target: np.ndarray  # (31, 2) lumen radius, wall width
    participant_id: str
    vessel_id: str
    z: int

    def __iter__(self):  # unpacks as (patch, target) for train()
        return iter((self.patch, self.target))


def jittered_center(st, rng, max_offset):
    """Random centre at a fraction in ``[0, max_offset]`` of the way to the lumen boundary."""
    psi = rng.uniform(0.0, 2.0 * math.pi)
    frac = rng.uniform(0.0, max_offset)
    reach = float(ray_ellipse_distance(st.lumen, st.center, st.center, psi))
    return st.center[0] + frac * reach * math.cos(psi), st.center[1] + frac * reach * math.sin(psi)


def build_training_set(cohort, n_patches=2000, max_offset=0.5, noise_levels=(0.0,), seed=0):
    """Patches spread evenly over every annotated slice of every vessel.

    ``cohort`` is the output of :func:`generate_cohort`. Each patch gets a
    fresh jittered centre and a noise level drawn from ``noise_levels``.
    """
    slices = [(i, t, st) for i, (_, truths) in enumerate(cohort) for t in truths for st in t.slices]
    if not slices or n_patches < 1:
        raise EmptyDataset("cohort has no annotated slices")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    volumes = {}
    out = []
    for k in range(n_patches):
        i, t, st = slices[k % len(slices)]
        level = float(noise_levels[int(rng.integers(len(noise_levels)))])
        key = (i, level)
        if key not in volumes:
            v = preprocess(cohort[i][0])
            if level > 0:
                v = add_noise(v, NoiseSpec(level, int(rng.integers(2 ** 32))))
            volumes[key] = v
        cx, cy = jittered_center(st, rng, max_offset)
        r, w = truth_radii(t, st.z, (cx, cy))
        patch = polar_transform(volumes[key], (cx, cy, st.z))
        out.append(PatchSample(patch, np.column_stack([r, w]), t.participant_id, t.vessel_id, st.z))
    return out
