"""Compare the compiled 3D-convolution kernels against the pure-numpy
fallback on training-representative shapes.

Usage: python3 benchmarks/bench_kernels.py [repeats]
"""

import importlib
import os
import sys
import time

import numpy as np

CASES = [
    # (n, c_in, c_out, spatial, k, stride) drawn from the actual models
    ("vae enc1 32^3", 2, 1, 16, 32, 3, 2),
    ("vae dec2 32^3", 2, 16, 1, 32, 3, 1),
    ("flow stem 8^3", 4, 10, 32, 8, 3, 1),
    ("flow up2 8^3", 4, 64, 32, 8, 3, 1),
    ("refiner q3 32^3", 2, 16, 4, 32, 3, 1),
]


def load_backend(name):
    os.environ["FLOWSYNTH_BACKEND"] = name
    for mod in list(sys.modules):
        if mod.startswith("flowsynth"):
            del sys.modules[mod]
    kernels = importlib.import_module("flowsynth.kernels")
    if kernels.BACKEND != name:
        return None
    return kernels


def bench(fn, repeats):
    fn()  # warm-up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def main():
    repeats = int(sys.argv[1]) if len(sys.argv) > 1 else 5
    backends = {}
    for name in ("python", "compiled"):
        mod = load_backend(name)
        if mod is None:
            print("backend %r unavailable, skipping" % name)
        else:
            backends[name] = mod
    rng = np.random.default_rng(0)
    print("%-18s %-12s %12s %12s %12s" % ("case", "backend",
                                          "fwd_ms", "gw_ms", "gx_ms"))
    for label, n, ci, co, sp, k, stride in CASES:
        x = rng.standard_normal((n, ci, sp, sp, sp)).astype(np.float32)
        w = rng.standard_normal((co, ci, k, k, k)).astype(np.float32)
        results = {}
        for name, mod in backends.items():
            y = mod.conv3d_forward(x, w, None, stride, 1)
            g = np.ones_like(y)
            fwd = bench(lambda: mod.conv3d_forward(x, w, None, stride, 1),
                        repeats)
            gw = bench(lambda: mod.conv3d_grad_weight(x, g, stride, 1, k),
                       repeats)
            gx = bench(lambda: mod.conv3d_grad_input(g, w, stride, 1,
                                                     x.shape[2:]), repeats)
            results[name] = (y, fwd, gw, gx)
            print("%-18s %-12s %12.3f %12.3f %12.3f"
                  % (label, name, fwd * 1e3, gw * 1e3, gx * 1e3))
        if len(results) == 2:
            ya, yb = results["python"][0], results["compiled"][0]
            dev = float(np.max(np.abs(ya - yb)))
            print("%-18s %-12s max forward deviation %.2e"
                  % (label, "(agree)", dev))


if __name__ == "__main__":
    main()
