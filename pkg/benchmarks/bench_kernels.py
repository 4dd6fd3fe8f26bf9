"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run: python benchmarks/bench_kernels.py
The dispatched path in normal use is controlled by the PCMAE_NUMBA env var;
this script imports both implementations directly and times them on the
default workload sizes (n=1024 points, g=64 centers, k=32 neighbours).
"""
from __future__ import annotations

import time

import numpy as np

from pcmae import kernels


def _time(fn, *args, repeats=20):
    fn(*args)  # warmup (and JIT compile for the numba path)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return float(np.mean(times) * 1000), float(np.std(times) * 1000)


def main() -> None:
    if not kernels.HAS_NUMBA:
        print("numba not importable; nothing to compare")
        return

    rng = np.random.default_rng(0)
    pts = rng.normal(size=(1024, 3))
    queries = pts[rng.choice(1024, 64, replace=False)]
    nbr = kernels.knn_indices(pts, queries, 32)
    centers = np.arange(64, dtype=np.int64)
    normals = rng.normal(size=(1024, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    pred = rng.normal(size=(38, 32, 3)).astype(np.float32)
    gt = rng.normal(size=(38, 32, 3)).astype(np.float32)

    cases = [
        ("fps n=1024 g=64", kernels._fps_numba, kernels._fps_numpy, (pts, 64, 0)),
        ("knn 64x1024 k=32", kernels._knn_numba, kernels._knn_numpy, (pts, queries, 32)),
        ("spfh g=64 k=32", kernels._spfh_numba, kernels._spfh_numpy,
         (pts, normals, centers, nbr, 11, False)),
        ("chamfer 38x32x32", kernels._chamfer_numba, kernels._chamfer_numpy, (pred, gt)),
    ]

    print(f"{'kernel':<20} {'numba (ms)':>14} {'numpy (ms)':>14} {'speedup':>9}")
    for name, fn_nb, fn_np, args in cases:
        out_nb = fn_nb(*args)
        out_np = fn_np(*args)
        flat_nb = out_nb if isinstance(out_nb, tuple) else (out_nb,)
        flat_np = out_np if isinstance(out_np, tuple) else (out_np,)
        for a, b in zip(flat_nb, flat_np):
            assert np.array_equal(np.asarray(a), np.asarray(b)), f"{name}: paths disagree"
        m_nb, s_nb = _time(fn_nb, *args)
        m_np, s_np = _time(fn_np, *args)
        print(f"{name:<20} {m_nb:>8.3f}+-{s_nb:<5.3f} {m_np:>8.3f}+-{s_np:<5.3f} "
              f"{m_np / m_nb:>8.1f}x")


if __name__ == "__main__":
    main()
