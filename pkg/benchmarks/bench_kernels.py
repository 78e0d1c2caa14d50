"""Time the compiled kernels against their pure-Python twins.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from latent_denoising import _pykernels

try:
    from latent_denoising import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    weights = rng.random(576)
    uniforms = rng.random(57)
    data = rng.integers(0, 256, size=64, dtype=np.uint8).tobytes()
    img = rng.random((64, 64, 3))
    offsets = rng.integers(-2, 2, size=(2, 60, 60, 2)).astype(np.int64)
    return {
        "weighted_draws (576 patches, 57 draws)": lambda k: k.weighted_draws(weights, uniforms),
        "fnv1a64 (64 bytes)": lambda k: k.fnv1a64(data),
        "glass_shuffle (64x64, 2 iters)": lambda k: k.glass_shuffle(img.copy(), 2, offsets),
    }


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the Python backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<40} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for name, fn in cases(rng).items():
        py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:<40} {py:>10.3f} {'-':>10} {'-':>8}")
            continue
        cy = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<40} {py:>10.3f} {cy:>10.3f} {py / cy:>7.1f}x")


if __name__ == "__main__":
    main()
