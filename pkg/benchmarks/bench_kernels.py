"""Compiled vs pure-Python kernel timings on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each row reports the median wall time per call for both backends, the
speedup, and the max abs difference between their outputs.
"""
import argparse
import statistics
import time

import numpy as np

from emodan import kernels


def cases(rng):
    b = 32
    x1, k1 = rng.normal(size=(b, 1, 64, 64)), rng.normal(size=(8, 1, 3, 3))
    x2, k2 = rng.normal(size=(b, 8, 32, 32)), rng.normal(size=(16, 8, 3, 3))
    g1, g2 = rng.normal(size=(b, 8, 64, 64)), rng.normal(size=(b, 16, 32, 32))
    pool = rng.normal(size=(b, 8, 64, 64))
    _, arg = kernels.maxpool2_forward(pool)
    gpool = rng.normal(size=(b, 8, 32, 32))
    imgs = rng.random((b, 64, 64))
    inv = np.tile([0.9, 0.1, 2.0, -1.0], (b, 1))
    pts = rng.uniform(0, 64, (b, 68, 2))
    return {
        "conv fwd 1->8 @64": lambda: kernels.conv3x3_forward(x1, k1, np.zeros(8)),
        "conv bwd 1->8 @64": lambda: kernels.conv3x3_backward(x1, k1, g1, need_gx=False),
        "conv fwd 8->16 @32": lambda: kernels.conv3x3_forward(x2, k2, np.zeros(16)),
        "conv bwd 8->16 @32": lambda: kernels.conv3x3_backward(x2, k2, g2),
        "maxpool fwd": lambda: kernels.maxpool2_forward(pool),
        "maxpool bwd": lambda: kernels.maxpool2_backward(gpool, arg),
        "warp bilinear": lambda: kernels.warp_bilinear(imgs, inv, 64, 64),
        "heatmap": lambda: kernels.heatmap(pts, 64, 64, 2.0),
    }


def flatten(out):
    if isinstance(out, tuple):
        return [a for o in out if o is not None for a in flatten(o)]
    return [np.asarray(out, dtype=np.float64)]


def timed(fn, repeat):
    out = fn()
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled backend not built; run `pip install -e . --no-build-isolation` first")
        return 1
    print(f"{'kernel':<20} {'compiled ms':>12} {'python ms':>10} {'speedup':>8} {'max diff':>9}")
    for name in cases(np.random.default_rng(0)):
        res = {}
        for backend in ("compiled", "python"):
            kernels.use_backend(backend)
            fn = cases(np.random.default_rng(0))[name]
            res[backend] = timed(fn, args.repeat)
        kernels.use_backend("compiled")
        diff = max(float(np.abs(a - b).max()) for a, b in zip(flatten(res["compiled"][1]), flatten(res["python"][1])))
        tc, tp = res["compiled"][0], res["python"][0]
        print(f"{name:<20} {tc * 1e3:>12.2f} {tp * 1e3:>10.2f} {tp / tc:>7.1f}x {diff:>9.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
