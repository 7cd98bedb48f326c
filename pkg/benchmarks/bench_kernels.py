"""Time the compiled lesion kernels against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5]

Both backends are imported directly, so the result does not depend on
``PETBENCH_PURE_PYTHON``. Outputs are checked for agreement before timing.
"""

import argparse
import timeit

import numpy as np

from petbench import _pykernels

try:
    from petbench import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    mask = rng.random((48, 96, 96)) < 0.3
    blob = np.argwhere(rng.random((20, 20, 20)) < 0.5).astype(np.float64)
    vol = rng.random((48, 96, 96))
    centers = np.argwhere(rng.random(vol.shape) < 0.02)
    z, y, x = np.mgrid[-3:4, -3:4, -3:4]
    offsets = np.stack([z.ravel(), y.ravel(), x.ravel()], 1)
    offsets = offsets[(offsets ** 2).sum(1) <= 9]
    return {
        "label26 48x96x96": lambda k: k.label26(mask),
        f"max_pairwise_distance n={len(blob)}": lambda k: k.max_pairwise_distance(blob),
        f"sphere_means {len(centers)} centres x {len(offsets)} offsets":
            lambda k: k.sphere_means(vol, centers, offsets),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if _ckernels is None:
        raise SystemExit("compiled kernels not built; run `pip install -e . --no-build-isolation` first")

    print(f"{'kernel':<48} {'cython ms':>10} {'python ms':>10} {'speedup':>8}")
    for name, call in cases(np.random.default_rng(args.seed)).items():
        a, b = call(_ckernels), call(_pykernels)
        if isinstance(a, tuple):
            assert a[1] == b[1] and np.array_equal(a[0], b[0]), name
        else:
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)
        tc = min(timeit.repeat(lambda: call(_ckernels), number=1, repeat=args.repeat)) * 1e3
        tp = min(timeit.repeat(lambda: call(_pykernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<48} {tc:>10.2f} {tp:>10.2f} {tp / tc:>7.1f}x")


if __name__ == "__main__":
    main()
