"""Time the compiled and pure-Python kernel backends on representative inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]

Shapes follow a desk-scale batch: 8 utterances of ~300 frames through the
first CNN layer, LPC order 12 over 300 frames, and character-level edit
distance on 30-character strings.
"""
import argparse
import timeit

import numpy as np

from streamfuse import kernels


def cases(rng):
    x = rng.standard_normal((8, 300, 83, 32)).astype(np.float32)
    cols = kernels.get_backend("python").im2col3x3(x, 2)
    frames = rng.standard_normal((300, 400))
    r = np.stack([np.correlate(f, f, "full")[399:412] for f in frames])
    ref = rng.integers(0, 27, 30)
    hyp = rng.integers(0, 27, 32)
    return {
        "im2col3x3": lambda k: k.im2col3x3(x, 2),
        "col2im3x3": lambda k: k.col2im3x3(cols, x.shape, 2),
        "levinson_batch": lambda k: k.levinson_batch(r, 12),
        "edit_counts": lambda k: k.edit_counts(ref, hyp),
    }


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = {"python": kernels.get_backend("python")}
    try:
        backends["cython"] = kernels.get_backend("cython")
    except ImportError:
        print("compiled backend not built; timing python only")
    print(f"{'kernel':<16}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for name, fn in cases(rng).items():
        times = {}
        for b, mod in backends.items():
            fn(mod)  # warm up
            number = 20 if name == "edit_counts" else 2
            times[b] = min(timeit.repeat(lambda: fn(mod), number=number, repeat=a.repeat)) / number
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{name:<16}" + "".join(f"{times[b] * 1e3:>10.3f}ms" for b in backends) + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
