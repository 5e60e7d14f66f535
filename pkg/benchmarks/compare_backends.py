"""Benchmark the compiled chain kernels against the NumPy fallback.

Runs forward-backward, Viterbi, and Gibbs sweeps on a few chain sizes
with both backends, checks they agree, and prints best-of-reps wall
times plus the speedup factor.

    python3 benchmarks/compare_backends.py
    python3 benchmarks/compare_backends.py --reps 9 --sweeps 300
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from altproj.kernels import _pykernels

try:
    from altproj.kernels import _ckernels
except ImportError:  # pragma: no cover - benchmark needs the extension
    _ckernels = None


def _tables(L, K, rng):
    node = rng.standard_normal((L, K))
    edge = rng.standard_normal((max(L - 1, 0), K, K))
    return node, edge


def _best(fn, reps):
    best = np.inf
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _check_agreement(node, edge, init, uniforms):
    nc, ec, zc = _ckernels.forward_backward(node, edge)
    np_, ep, zp = _pykernels.forward_backward(node, edge)
    if not (np.allclose(nc, np_, atol=1e-10) and np.allclose(ec, ep, atol=1e-10)
            and abs(zc - zp) < 1e-8):
        raise AssertionError("backends disagree on forward-backward")
    if not np.array_equal(_ckernels.viterbi_path(node, edge),
                          _pykernels.viterbi_path(node, edge)):
        raise AssertionError("backends disagree on the Viterbi path")
    sc = _ckernels.gibbs_paths(node, edge, 0.5, init, uniforms, 10, 2)
    sp_ = _pykernels.gibbs_paths(node, edge, 0.5, init, uniforms, 10, 2)
    if not np.array_equal(sc, sp_):
        raise AssertionError("backends disagree on Gibbs sample paths")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=7,
                    help="timing repetitions per cell (best is kept)")
    ap.add_argument("--sweeps", type=int, default=200,
                    help="Gibbs sweeps per benchmark call")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if _ckernels is None:
        print("compiled extension not available; nothing to compare")
        return 1

    rng = np.random.default_rng(args.seed)
    shapes = [(50, 2), (50, 8), (400, 4), (400, 16), (2000, 8)]
    print(f"{'op':<18}{'L':>6}{'K':>4}{'pure':>12}{'compiled':>12}{'speedup':>9}")
    for L, K in shapes:
        node, edge = _tables(L, K, rng)
        init = rng.integers(K, size=L)
        uniforms = rng.random((args.sweeps, L))
        _check_agreement(node, edge, init, uniforms)
        cells = [
            ("forward_backward",
             lambda: _pykernels.forward_backward(node, edge),
             lambda: _ckernels.forward_backward(node, edge)),
            ("viterbi_path",
             lambda: _pykernels.viterbi_path(node, edge),
             lambda: _ckernels.viterbi_path(node, edge)),
            ("gibbs_paths",
             lambda: _pykernels.gibbs_paths(node, edge, 0.5, init, uniforms,
                                            10, 2),
             lambda: _ckernels.gibbs_paths(node, edge, 0.5, init, uniforms,
                                           10, 2)),
        ]
        for name, pure_fn, c_fn in cells:
            tp = _best(pure_fn, args.reps)
            tc = _best(c_fn, args.reps)
            print(f"{name:<18}{L:>6}{K:>4}{tp * 1e3:>10.3f}ms"
                  f"{tc * 1e3:>10.3f}ms{tp / tc:>8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
