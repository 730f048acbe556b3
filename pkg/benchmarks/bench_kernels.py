"""Time the numba kernels against their pure-numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both flavours live side by side in ``carotid_qa.kernels`` (``*_nb`` and
``*_np``), so one process can compare them regardless of
``CAROTID_QA_BACKEND``. Each kernel is warmed up once (numba compiles on the
first call) and the best of ``--repeat`` runs is reported.
"""
import argparse
import time

import numpy as np

from carotid_qa import kernels as K
from carotid_qa._accel import HAVE_NUMBA


def best_of(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    img = rng.random((10, 160, 320)).astype(np.float32)
    theta = 2 * np.pi * np.arange(31) / 31
    ang = np.linspace(0, 2 * np.pi, 31, endpoint=False)
    poly = np.column_stack([60 + 40 * np.cos(ang), 60 + 30 * np.sin(ang)])
    xp = rng.random((16, 8, 33, 7, 44)).astype(np.float32)
    w = rng.random((8, 8, 3, 3, 5)).astype(np.float32)
    b = np.zeros(8, np.float32)
    g = rng.random((16, 8, 31, 5, 40)).astype(np.float32)
    return [
        ("polar_sample", K.polar_sample_nb, K.polar_sample_np,
         (img, 160.0, 80.0, 5, np.cos(theta), np.sin(theta), 127, 3)),
        ("rasterize", K.rasterize_nb, K.rasterize_np,
         (np.ascontiguousarray(poly[:, 0]), np.ascontiguousarray(poly[:, 1]), 128, 128)),
        ("ellipse_coverage", K.ellipse_coverage_nb, K.ellipse_coverage_np,
         (0.0, 0.0, 40, 40, 20.0, 20.0, 12.0, 9.0, 0.3, 4)),
        ("conv_forward", K.conv_forward_nb, K.conv_forward_np, (xp, w, b)),
        ("conv_grad_input", K.conv_grad_input_nb, K.conv_grad_input_np, (g, w, xp.shape)),
        ("conv_grad_weight", K.conv_grad_weight_nb, K.conv_grad_weight_np, (xp, g, (3, 3, 5))),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        print("numba is not installed; the *_nb kernels run as plain python")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}{'max |diff|':>12}")
    for name, nb, npf, args_ in cases(rng):
        diff = float(np.max(np.abs(np.asarray(nb(*args_), dtype=np.float64) - np.asarray(npf(*args_), dtype=np.float64))))
        t_nb = best_of(nb, args_, args.repeat)
        t_np = best_of(npf, args_, args.repeat)
        print(f"{name:<18}{t_nb * 1e3:>10.2f}{t_np * 1e3:>10.2f}{t_np / t_nb:>9.2f}{diff:>12.2e}")


if __name__ == "__main__":
    main()
