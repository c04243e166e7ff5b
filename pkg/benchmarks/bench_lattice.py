"""Benchmark the CTC lattice kernels: compiled extension vs numpy fallback.

Run as ``python3 benchmarks/bench_lattice.py``. Times forward_backward over a
grid of (frames, vocab, label length) shapes and reports per-call medians and
the speedup. Both backends run on identical inputs and their log-Z values are
cross-checked to 1e-12 first, so the numbers compare equal work.
"""

from __future__ import annotations

import time

import numpy as np

from lwfs import lattice, lattice_np
from lwfs.ctc import extended_labels

try:
    from lwfs import _lattice as lattice_ext
except ImportError:
    lattice_ext = None

SHAPES = [
    # (T, V, L) roughly: short utterance, desk-scale batch row, long tail
    (20, 8, 5),
    (40, 16, 10),
    (80, 25, 20),
    (160, 25, 40),
    (320, 50, 60),
]
REPEATS = 30


def _instance(rng, t, v, l):
    logits = rng.normal(0.0, 1.0, (t, v))
    lp = logits - np.log(np.exp(logits - logits.max(1, keepdims=True)).sum(1, keepdims=True)) \
        - logits.max(1, keepdims=True)
    labels = rng.integers(1, v, size=l).tolist()
    return np.ascontiguousarray(lp), np.asarray(extended_labels(labels), dtype=np.int32)


def _time(fn, args_list) -> float:
    best = []
    for args in args_list:
        t0 = time.perf_counter()
        fn(*args)
        best.append(time.perf_counter() - t0)
    return float(np.median(best))


def main() -> None:
    if lattice_ext is None:
        print("compiled backend not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    rows = []
    for t, v, l in SHAPES:
        args_list = [_instance(rng, t, v, l) for _ in range(REPEATS)]
        for lp, ext in args_list[:3]:
            z_np = lattice_np.forward_backward(lp, ext)[0]
            if lattice_ext is not None:
                z_c = lattice_ext.forward_backward(lp, ext)[0]
                assert abs(z_np - z_c) < 1e-12, (z_np, z_c)
        t_np = _time(lattice_np.forward_backward, args_list)
        if lattice_ext is not None:
            t_c = _time(lattice_ext.forward_backward, args_list)
            rows.append((f"T={t} V={v} L={l}", t_np * 1e6, t_c * 1e6, t_np / t_c))
        else:
            rows.append((f"T={t} V={v} L={l}", t_np * 1e6, None, None))

    print(f"active backend: {lattice.BACKEND}")
    header = f"{'shape':<18} {'numpy (us)':>12} {'compiled (us)':>14} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for label, us_np, us_c, speedup in rows:
        if us_c is None:
            print(f"{label:<18} {us_np:>12.1f} {'-':>14} {'-':>9}")
        else:
            print(f"{label:<18} {us_np:>12.1f} {us_c:>14.1f} {speedup:>8.1f}x")


if __name__ == "__main__":
    main()
