#!/usr/bin/env python3
"""Benchmark the compiled residual-power kernel against the NumPy fallback.

Run:  python benchmarks/bench_qcore.py
"""

import timeit

import numpy as np

from qres import geometry
from qres._kernels import BACKEND, _qcore_py, q_batch, q_eval


def time_call(fn, number):
    return timeit.timeit(fn, number=number) / number


def main():
    rng = np.random.default_rng(42)
    print(f"selected backend: {BACKEND}")
    if BACKEND == "python":
        print("compiled kernel unavailable; timing the fallback against itself")
    rows = []
    for name, n, m in [("elan_11_l", 11, 2), ("elan_21_l", 21, 2), ("elan_192", 192, 3)]:
        geom = geometry.preset(name)
        u = np.linspace(-0.05, 0.05, m)
        v = np.zeros(m) if geom.kind == "linear" else np.linspace(-0.02, 0.02, m)
        z = rng.standard_normal(geom.n_elements) + 1j * rng.standard_normal(geom.n_elements)
        number = 20000 if geom.n_elements <= 32 else 2000
        t_sel = time_call(lambda: q_eval(geom.x, geom.y, u, v, z, True), number)
        t_py = time_call(lambda: _qcore_py.q_eval(geom.x, geom.y, u, v, z, True), number // 10)
        rows.append((f"{name} grad (N={geom.n_elements}, M={m})", t_sel, t_py))
    geom = geometry.preset("elan_21_l")
    u = np.array([-0.04, 0.04])
    v = np.zeros(2)
    snaps = rng.standard_normal((1000, 21)) + 1j * rng.standard_normal((1000, 21))
    t_batch = time_call(lambda: q_batch(geom.x, geom.y, u, v, snaps), 200)
    print(f"{'case':40s} {'selected':>12s} {'numpy':>12s} {'speedup':>8s}")
    for label, t_sel, t_py in rows:
        print(f"{label:40s} {t_sel * 1e6:10.2f}us {t_py * 1e6:10.2f}us {t_py / t_sel:7.1f}x")
    print(f"{'batch of 1000 snapshots (shared)':40s} {t_batch * 1e6:10.2f}us")


if __name__ == "__main__":
    main()
