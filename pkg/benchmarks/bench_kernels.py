"""Compare the compiled and numpy LSTM recurrence kernels.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Times one forward plus backward pass of the attractor encoder recurrence
for a few (batch, frames, dim) shapes and checks both backends agree.
"""
import argparse
import time

import numpy as np

from eend import _kernels_py, kernels

SHAPES = [(1, 500, 64), (8, 100, 64), (8, 500, 64), (8, 500, 256), (32, 500, 256)]


def run_once(mod, args):
    gates, w_hh, h0, c0, dh = args
    hs, cs, acts = mod.lstm_forward(gates, w_hh, h0, c0)
    mod.lstm_backward(dh, np.zeros_like(h0), np.zeros_like(c0), w_hh, h0, c0, cs, acts)
    return hs


def best_time(mod, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        run_once(mod, args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    opts = ap.parse_args()
    if "compiled" not in kernels.available_backends():
        raise SystemExit("compiled extension not built; run: pip install --no-build-isolation -e .")
    from eend import _lstm

    rng = np.random.default_rng(0)
    print(f"{'B':>4} {'T':>5} {'D':>5} {'numpy ms':>10} {'compiled ms':>12} {'speedup':>8} {'max diff':>10}")
    for b, t, d in SHAPES:
        args = (rng.normal(size=(b, t, 4 * d)), rng.normal(size=(4 * d, d)) / np.sqrt(d),
                rng.normal(size=(b, d)), rng.normal(size=(b, d)), rng.normal(size=(b, t, d)))
        diff = np.abs(run_once(_lstm, args) - run_once(_kernels_py, args)).max()
        py = best_time(_kernels_py, args, opts.repeat)
        cy = best_time(_lstm, args, opts.repeat)
        print(f"{b:>4} {t:>5} {d:>5} {1e3 * py:>10.2f} {1e3 * cy:>12.2f} {py / cy:>7.1f}x {diff:>10.1e}")


if __name__ == "__main__":
    main()
