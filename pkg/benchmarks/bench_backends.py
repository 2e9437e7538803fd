"""Wall time of stiffness assembly with the numba and numpy kernels.

Usage: python3 benchmarks/bench_backends.py [--repeat 3]

The first numba call includes compilation; it is timed separately as
``warmup`` and excluded from the reported best time.
"""
import argparse
import time

import numpy as np

from fracfem.assembly import assemble_stiffness
from fracfem.mesh import GradingSpec, Interval, build_graded, build_quasi_uniform, unit_square

CASES = [
    ("1D quasi-uniform h=2^-7", lambda: build_quasi_uniform(Interval(-1, 1), 2.0**-7), 0.5),
    ("1D quasi-uniform h=2^-9", lambda: build_quasi_uniform(Interval(-1, 1), 2.0**-9), 0.5),
    ("2D graded mu=2 h=1/4", lambda: build_graded(unit_square(), GradingSpec(h=0.25, mu=2.0)), 0.5),
]


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    warm = build_quasi_uniform(Interval(-1, 1), 0.5)
    t0 = time.perf_counter()
    assemble_stiffness(warm, 0.5, backend="numba")
    assemble_stiffness(build_graded(unit_square(), GradingSpec(h=0.5, mu=2.0)), 0.5, backend="numba")
    print(f"numba warmup (compilation): {time.perf_counter() - t0:.2f}s")
    print(f"{'case':28s} {'N':>6s} {'numba [s]':>10s} {'numpy [s]':>10s} {'speedup':>8s} {'max|diff|/max|A|':>17s}")
    for label, make, s in CASES:
        mesh = make()
        tn, a = best_time(lambda: assemble_stiffness(mesh, s, backend="numba"), args.repeat)
        tp, b = best_time(lambda: assemble_stiffness(mesh, s, backend="numpy"), args.repeat)
        rel = np.max(np.abs(a - b)) / np.max(np.abs(a))
        print(f"{label:28s} {mesh.n_dofs:6d} {tn:10.3f} {tp:10.3f} {tp / tn:8.1f} {rel:17.1e}")


if __name__ == "__main__":
    main()
