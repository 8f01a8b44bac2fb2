"""Compare the numba and pure-numpy backends of the numeric kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel is run once per backend to warm up (numba compiles on first
call), then timed ``--repeat`` times; the best time is reported along with
the largest absolute difference between the two backends' outputs.
"""
import argparse
import time

import numpy as np

from turbdet import _accel, kernels


def _cases(rng):
    img = rng.random((256, 256, 3))
    field = rng.normal(0, 2, (256, 256, 2))
    yield "warp_bilinear 256x256x3", lambda: kernels.warp_bilinear(img, field)

    L, D, N = 512, 16, 8
    u, delta = rng.normal(size=(L, D)), rng.uniform(0.01, 0.2, (L, D))
    A, B, C = -rng.uniform(0.5, 2, (D, N)), rng.normal(size=(L, N)), rng.normal(size=(L, N))
    yield f"ssm_scan L={L} D={D} N={N}", lambda: kernels.ssm_scan_sequential(u, delta, A, B, C)

    ious = rng.random((300, 60))
    ignore = rng.random(60) < 0.2
    yield "greedy_match 300x60", lambda: kernels.greedy_match(ious, ignore, 0.5)

    x = rng.random((1, 5, 16, 16, 8))
    P = 5 * 16 * 16
    grid = np.stack(np.meshgrid(np.arange(5), np.arange(16), np.arange(16), indexing="ij")).reshape(3, P)
    pos = (grid[None, None] + rng.normal(0, 0.7, (1, 27, 3, P)))
    yield "deform_sample 5x16x16x8 K=27", lambda: kernels.deform_sample(x, pos)
    cols = kernels.deform_sample(x, pos)
    yield "deform_sample_backward", lambda: kernels.deform_sample_backward(x, pos, cols)


def _time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)), initial=0.0))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; only the numpy backend can run")
        return 1
    saved = _accel.USE_NUMBA
    print(f"{'kernel':34s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s} {'max diff':>10s}")
    try:
        for name, fn in _cases(np.random.default_rng(args.seed)):
            _accel.USE_NUMBA = True
            t_nb, out_nb = _time(fn, args.repeat)
            _accel.USE_NUMBA = False
            t_np, out_np = _time(fn, args.repeat)
            print(f"{name:34s} {1e3 * t_nb:10.2f} {1e3 * t_np:10.2f} {t_np / t_nb:8.1f} {_max_diff(out_nb, out_np):10.2e}")
    finally:
        _accel.USE_NUMBA = saved
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
