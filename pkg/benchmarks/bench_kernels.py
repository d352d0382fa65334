"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N] [--json]

Both backends are called directly, so one process covers both; the
IMTED_DISABLE_NUMBA flag only changes which one the library dispatches to.
"""
import argparse
import json
import timeit

import numpy as np

from imted import _accel


def _cases(rng):
    feat = rng.normal(size=(8, 64, 16, 16)).astype(np.float32)
    P = 100 * 49 * 4
    b = rng.integers(0, 8, P).astype(np.int64)
    ys = rng.uniform(-1, 16, P)
    xs = rng.uniform(-1, 16, P)
    grad = rng.normal(size=(P, 64)).astype(np.float32)
    xy = rng.uniform(0, 600, (2000, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(10, 120, (2000, 2))], 1)
    return {
        "bilinear_gather": (lambda: _accel.bilinear_gather_numpy(feat, b, ys, xs),
                            lambda: _accel.bilinear_gather_numba(feat, b, ys, xs)),
        "bilinear_scatter": (lambda: _accel.bilinear_scatter_numpy(grad, b, ys, xs, feat.shape),
                             lambda: _accel.bilinear_scatter_numba(grad, b, ys, xs, feat.shape)),
        "nms_2000": (lambda: _accel.nms_numpy(boxes, 0.7), lambda: _accel.nms_numba(boxes, 0.7)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)
    if not _accel._HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rows = []
    for name, (np_fn, nb_fn) in _cases(np.random.default_rng(0)).items():
        nb_fn()  # compile outside the timed region
        t_np = min(timeit.repeat(np_fn, number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(nb_fn, number=1, repeat=args.repeat))
        rows.append({"kernel": name, "numpy_ms": 1e3 * t_np, "numba_ms": 1e3 * t_nb, "speedup": t_np / t_nb})
    if args.json:
        print(json.dumps(rows, indent=1))
        return
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for r in rows:
        print(f"{r['kernel']:<18}{r['numpy_ms']:>10.2f}{r['numba_ms']:>10.2f}{r['speedup']:>8.1f}x")


if __name__ == "__main__":
    main()
