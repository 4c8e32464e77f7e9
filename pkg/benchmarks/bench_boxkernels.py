"""Compare the compiled box kernels against the pure-Python fallback.

    python benchmarks/bench_boxkernels.py [--repeat 5]

Each row times one kernel on both backends with identical inputs, checks that
the outputs agree, and prints the speedup.
"""
import argparse
import timeit

import numpy as np

from rcdet import boxes


def _random_boxes(rng, n):
    xy = rng.uniform(0, 0.8, (n, 2))
    wh = rng.uniform(0.02, 0.2, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def cases(rng):
    a, b = _random_boxes(rng, 300), _random_boxes(rng, 300)
    dense = _random_boxes(rng, 2000)
    scores = rng.uniform(size=2000)
    iou = rng.uniform(size=(60, 80))
    return [
        ("iou_matrix 300x300", lambda be: boxes.iou_matrix(a, b, backend=be)),
        ("nms 2000 boxes", lambda be: boxes.nms(dense, scores, 0.5, backend=be)),
        ("greedy_match 60x80", lambda be: boxes.greedy_match(iou, 0.5, backend=be)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if boxes.BACKEND != "compiled":
        print("compiled kernels are not built; only the Python fallback is available")
        return 1
    print(f"{'kernel':<22}{'compiled ms':>14}{'python ms':>12}{'speedup':>10}")
    for name, fn in cases(np.random.default_rng(0)):
        np.testing.assert_allclose(fn("compiled"), fn("python"), atol=1e-12)
        t = {}
        for be in ("compiled", "python"):
            number = 3 if be == "python" else 20
            t[be] = min(timeit.repeat(lambda: fn(be), number=number, repeat=args.repeat)) / number * 1e3
        print(f"{name:<22}{t['compiled']:>14.3f}{t['python']:>12.3f}{t['python'] / t['compiled']:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
