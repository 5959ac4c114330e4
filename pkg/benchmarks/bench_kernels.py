"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs on identical inputs under both backends; the table shows
the best-of-N wall time and the largest absolute difference in the outputs.
"""
import argparse
import time

import numpy as np

from egoplan import _pykernels as py

try:
    from egoplan import _ckernels as cy
except ImportError:  # pragma: no cover
    cy = None


def _inputs(seed=0):
    rng = np.random.default_rng(seed)
    cells = rng.uniform(-30, 30, (7200, 2))
    a = np.column_stack([rng.uniform(-5, 5, (20000, 2)), rng.uniform(-np.pi, np.pi, 20000),
                         rng.uniform(0.2, 3, (20000, 2))])
    b = np.column_stack([rng.uniform(-5, 5, (20000, 2)), rng.uniform(-np.pi, np.pi, 20000),
                         rng.uniform(0.2, 3, (20000, 2))])
    B, N, C = 20, 7200, 16
    A = rng.normal(size=(B, C))
    P = rng.normal(size=(N, C))
    bias = rng.normal(size=C) * 0.1
    gh = rng.normal(size=(B, C))
    T = rng.uniform(0, 1, (B, N))
    return {
        "min_dist_points": (cells, rng.uniform(-30, 30, (6, 2))),
        "min_dist_polyline": (cells, np.column_stack([np.linspace(-30, 30, 120),
                                                      rng.normal(0, 2, 120)])),
        "obb_separation": (a, b),
        "response_squeeze": (A, P, bias),
        "response_head": (A, P, bias, gh, 0.1, T, 0.05, 1.0, 0.9),
        "response_backprop": (A, P, bias, rng.normal(size=(B, N)) * 1e-3, gh, rng.normal(size=(B, C))),
    }


def _flat(out):
    if isinstance(out, tuple):
        return [np.asarray(o, dtype=np.float64).ravel() for o in out]
    return [np.asarray(out, dtype=np.float64).ravel()]


def _time(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if cy is None:
        print("compiled extension not built; only the numpy backend is available")
    print(f"{'kernel':<20}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}{'max |diff|':>12}")
    for name, inp in _inputs().items():
        t_py, o_py = _time(getattr(py, name), inp, args.repeat)
        if cy is None:
            print(f"{name:<20}{1e3 * t_py:>10.2f}{'-':>11}{'-':>9}{'-':>12}")
            continue
        t_cy, o_cy = _time(getattr(cy, name), inp, args.repeat)
        diff = max(float(np.max(np.abs(x - y))) if x.size else 0.0
                   for x, y in zip(_flat(o_py), _flat(o_cy)))
        print(f"{name:<20}{1e3 * t_py:>10.2f}{1e3 * t_cy:>11.2f}{t_py / t_cy:>8.1f}x{diff:>12.2e}")


if __name__ == "__main__":
    main()
