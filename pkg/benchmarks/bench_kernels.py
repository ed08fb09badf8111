"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Times the raw kernels at shapes the compressor actually produces, then one
full compress call of the default configuration on each backend, and checks
that both backends give bit-identical compressed tokens.
"""

import argparse
import timeit

import numpy as np

from tokencompress import kernels
from tokencompress.pipeline import CompressionConfig, compress, init_params

SHAPES = {
    "kv projection 512x8 @ 8x8": ((512, 8), (8, 8)),
    "stc scores 16x8 @ 8x256": ((16, 8), (8, 256)),
    "src windows 128x1x8 @ 128x8x4": ((128, 1, 8), (128, 8, 4)),
    "readout 32x1280 @ 1280x16": ((32, 1280), (1280, 16)),
}


def best_of(fn, repeat):
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not kernels.HAVE_COMPILED:
        print("compiled kernels not built; only the numpy fallback is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'case':40s} {'cython':>12s} {'python':>12s} {'speedup':>8s}")
    for name, (sa, sb) in SHAPES.items():
        a, b = rng.normal(size=sa), rng.normal(size=sb)
        t = {be: best_of(lambda be=be: kernels.matmul(a, b, be), args.repeat) for be in ("cython", "python")}
        print(f"{name:40s} {t['cython'] * 1e6:10.1f}us {t['python'] * 1e6:10.1f}us {t['python'] / t['cython']:7.1f}x")
    x = rng.normal(size=(16, 256))
    t = {be: best_of(lambda be=be: kernels.softmax_lastaxis(x, be), args.repeat) for be in ("cython", "python")}
    print(f"{'softmax 16x256':40s} {t['cython'] * 1e6:10.1f}us {t['python'] * 1e6:10.1f}us {t['python'] / t['cython']:7.1f}x")

    cfg = CompressionConfig()
    params = init_params(cfg, 0)
    views = [rng.normal(size=(cfg.H, cfg.W, cfg.D)) for _ in range(cfg.views)]
    instr = rng.normal(size=(6, cfg.D))
    t, z = {}, {}
    for be in ("cython", "python"):
        with kernels.use_backend(be):
            t[be] = best_of(lambda: compress(params, views, instr), args.repeat)
            z[be] = compress(params, views, instr).z
    print(f"{'compress, default config':40s} {t['cython'] * 1e3:10.2f}ms {t['python'] * 1e3:10.2f}ms "
          f"{t['python'] / t['cython']:7.1f}x")
    print("backends bit-identical on Z:", bool(np.array_equal(z["cython"], z["python"])))


if __name__ == "__main__":
    main()
