"""Compare the compiled and pure-Python kernels on CTC and edit distance.

    python benchmarks/bench_kernels.py [--repeat 20] [--seed 0]

Prints one row per (kernel, size) with the median wall time of each backend,
the speedup, and the max absolute difference between their outputs.
"""
import argparse
import statistics
import sys
import time

import numpy as np

from hlora_asr import _pykernels

try:
    from hlora_asr import _ckernels
except ImportError:
    _ckernels = None


def median_ms(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * statistics.median(times), out


def ctc_case(rng, T, U, V):
    x = rng.normal(size=(T, V))
    lp = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
    return lp, rng.integers(1, V, size=U).astype(np.int64)


def edit_case(rng, n):
    return rng.integers(1, 20, size=n).astype(np.int64), rng.integers(1, 20, size=n).astype(np.int64)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 2
    rng = np.random.default_rng(args.seed)
    rows = []
    for T, U, V in [(20, 5, 16), (80, 20, 108), (200, 40, 108)]:
        lp, tg = ctc_case(rng, T, U, V)
        py_ms, (py_loss, py_grad) = median_ms(lambda: _pykernels.ctc_forward_backward(lp, tg, 0), args.repeat)
        c_ms, (c_loss, c_grad) = median_ms(lambda: _ckernels.ctc_forward_backward(lp, tg, 0), args.repeat)
        diff = max(abs(py_loss - c_loss), float(np.abs(np.asarray(py_grad) - np.asarray(c_grad)).max()))
        rows.append((f"ctc T={T} U={U} V={V}", py_ms, c_ms, diff))
    for n in (10, 50, 200):
        r, h = edit_case(rng, n)
        py_ms, py_out = median_ms(lambda: _pykernels.edit_ops(r, h), args.repeat)
        c_ms, c_out = median_ms(lambda: _ckernels.edit_ops(r, h), args.repeat)
        diff = float(np.abs(np.subtract(tuple(py_out), tuple(c_out))).max())
        rows.append((f"edit n={n}", py_ms, c_ms, diff))

    print(f"{'kernel':<26}{'python ms':>12}{'cython ms':>12}{'speedup':>10}{'max diff':>12}")
    for name, py_ms, c_ms, diff in rows:
        print(f"{name:<26}{py_ms:>12.3f}{c_ms:>12.3f}{py_ms / c_ms:>9.1f}x{diff:>12.1e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
