"""Time the compiled and pure-numpy kernels on simulation-sized inputs.

    python3 benchmarks/bench_kernels.py [--rows 5000] [--repeat 20]

Rows default to one Scenario 1 replicate (500 subjects x 10 visits).
"""

import argparse
import time

import numpy as np

from msmcalib import _backend, _kernels


def _time(fn, repeat):
    fn()  # warm-up (and JIT compile)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--rows", type=int, default=5000)
    ap.add_argument("--cols", type=int, default=18)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    m, r = args.rows, args.cols
    K = rng.standard_normal((m, r))
    w0 = rng.uniform(0.5, 2.0, m)
    lam = 0.01 * rng.standard_normal(r)
    l = K.T @ w0
    X = np.column_stack([np.ones(m), rng.standard_normal((m, 6))])
    y = (rng.random(m) < 0.4).astype(float)
    wt = np.ones(m)
    beta = 0.1 * rng.standard_normal(X.shape[1])

    cases = {
        "tilt_eval": lambda: _kernels.tilt_eval(w0, K, lam, l),
        "logistic_eval": lambda: _kernels.logistic_eval(X, y, wt, beta),
    }
    backends = ["numpy"] + (["numba"] if _backend.NUMBA_AVAILABLE else [])
    print(f"rows={m} restriction_cols={r} repeat={args.repeat}")
    print(f"{'kernel':<16}" + "".join(f"{b:>12}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    original = _backend.get_backend()
    try:
        for name, fn in cases.items():
            times = []
            for b in backends:
                _backend.set_backend(b)
                times.append(_time(fn, args.repeat))
            row = f"{name:<16}" + "".join(f"{t * 1e3:>10.3f}ms" for t in times)
            if len(times) > 1:
                row += f"{times[0] / times[1]:>9.2f}x"
            print(row)
    finally:
        _backend.set_backend(original)


if __name__ == "__main__":
    main()
