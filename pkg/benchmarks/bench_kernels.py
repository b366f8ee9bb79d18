"""Compare the numba kernels against the pure-numpy fallbacks.

Both paths are imported directly, so the BAYESHAR_DISABLE_JIT flag does
not matter here. Outputs are checked for agreement before timing.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from bayeshar._kernels import numba_impl, numpy_impl
from bayeshar.data import design_butterworth


def _best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    parser = argparse.ArgumentParser(description="numba vs numpy kernel timings")
    parser.add_argument("--samples", type=int, default=200_000)
    parser.add_argument("--batch", type=int, default=256)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    coeffs = design_butterworth(3, 0.3, 100.0)
    x = rng.normal(size=(6, args.samples))
    z = rng.normal(size=(args.batch, 16))
    labels = rng.integers(0, 8, size=args.batch)

    cases = {
        "iir_filter": lambda impl: impl.iir_filter(coeffs.b, coeffs.a, x),
        "pairwise_sqdist": lambda impl: impl.pairwise_sqdist(z),
        "mine_hard": lambda impl: impl.mine_hard(numpy_impl.pairwise_sqdist(z), labels),
        "mine_semihard": lambda impl: impl.mine_semihard(numpy_impl.pairwise_sqdist(z), labels, 0.5),
    }

    print(f"samples={args.samples} batch={args.batch} repeats={args.repeats}")
    print(f"{'kernel':<18}{'numpy_s':>12}{'numba_s':>12}{'speedup':>10}")
    for name, call in cases.items():
        ref = call(numpy_impl)
        out = call(numba_impl)  # also triggers compilation
        for a, b in zip(np.atleast_1d(ref) if not isinstance(ref, tuple) else ref,
                        np.atleast_1d(out) if not isinstance(out, tuple) else out):
            if not np.allclose(a, b, rtol=1e-10, atol=1e-10):
                raise SystemExit(f"{name}: numba and numpy outputs disagree")
        t_np = _best_of(lambda: call(numpy_impl), args.repeats)
        t_nb = _best_of(lambda: call(numba_impl), args.repeats)
        print(f"{name:<18}{t_np:>12.6f}{t_nb:>12.6f}{t_np / max(t_nb, 1e-12):>9.1f}x")


if __name__ == "__main__":
    main()
