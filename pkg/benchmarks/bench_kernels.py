"""Time the compiled kernels against the numpy fallback on rollout-sized inputs.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from orchestra import _kernels_py

try:
    from orchestra import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    sizes = (70, 64, 64, 17)
    weights = [rng.normal(size=(a, b)) * 0.1 for a, b in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(b) for b in sizes[1:]]
    x = rng.normal(size=sizes[0])
    logits = rng.normal(size=17)
    mask = (rng.random(17) < 0.6).astype(np.uint8)
    mask[0] = 1
    residual = rng.random((16, 3))
    demand = rng.random(3) * 0.5
    active = np.ones(16, dtype=bool)
    return {
        "mlp_forward": lambda k: k.mlp_forward(weights, biases, x),
        "masked_softmax": lambda k: k.masked_softmax(logits, mask),
        "sample_index": lambda k: k.sample_index(np.full(17, 1 / 17), 0.42),
        "fits": lambda k: k.fits(residual, demand, active),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20000)
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16}{'numpy us':>10}{'cython us':>11}{'speedup':>9}")
    for name, call in cases(rng).items():
        py = min(timeit.repeat(lambda: call(_kernels_py), number=args.repeat, repeat=3)) / args.repeat * 1e6
        if _kernels is None:
            print(f"{name:<16}{py:>10.2f}{'n/a':>11}{'':>9}")
            continue
        np.testing.assert_allclose(call(_kernels), call(_kernels_py), rtol=1e-12, atol=1e-12)
        cy = min(timeit.repeat(lambda: call(_kernels), number=args.repeat, repeat=3)) / args.repeat * 1e6
        print(f"{name:<16}{py:>10.2f}{cy:>11.2f}{py / cy:>8.1f}x")


if __name__ == "__main__":
    main()
