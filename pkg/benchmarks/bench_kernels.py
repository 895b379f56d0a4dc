"""Compare the numba and pure-numpy kernels on scene-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeats 5]

Both paths are called directly, so the ``DIFFREF3D_DISABLE_NUMBA`` flag does
not matter here. The first numba call (compilation) is excluded from timing.
"""

import argparse
import time

import numpy as np

from diffref3d import _accel
from diffref3d.scene import generate_corpus, generate_proposals


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--scenes", type=int, default=50)
    args = parser.parse_args()

    if not _accel.HAVE_NUMBA:
        print("numba not importable; only the numpy path is available")
        return

    scenes = generate_corpus(0, args.scenes)
    batches = [generate_proposals(s, 0) for s in scenes]
    pairs = [(s.points, b.proposals) for s, b in zip(scenes, batches)]
    rng = np.random.default_rng(0)
    a = np.concatenate([b.proposals for b in batches])
    b = a.copy()
    b[:, :2] += rng.normal(0, 0.3, size=(len(a), 2))
    b[:, 6] += rng.normal(0, 0.2, size=len(a))

    # warm-up compiles the jitted kernels
    _accel.roi_grid_numba(*pairs[0])
    _accel.bev_overlap_numba(a[:2], b[:2])

    for p, q in pairs[:5]:
        np.testing.assert_allclose(_accel.roi_grid_numba(p, q), _accel.roi_grid_numpy(p, q), atol=1e-12)
    np.testing.assert_allclose(_accel.bev_overlap_numba(a, b), _accel.bev_overlap_numpy(a, b), atol=1e-9)

    rows = [
        ("roi_grid", lambda: [_accel.roi_grid_numpy(p, q) for p, q in pairs], lambda: [_accel.roi_grid_numba(p, q) for p, q in pairs]),
        ("bev_overlap", lambda: _accel.bev_overlap_numpy(a, b), lambda: _accel.bev_overlap_numba(a, b)),
    ]
    n_boxes = len(a)
    print(f"{args.scenes} scenes, {n_boxes} proposals, best of {args.repeats}")
    print(f"{'kernel':<12} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, slow, fast in rows:
        t_np = best_of(slow, args.repeats) * 1e3
        t_nb = best_of(fast, args.repeats) * 1e3
        print(f"{name:<12} {t_np:>10.2f} {t_nb:>10.2f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
