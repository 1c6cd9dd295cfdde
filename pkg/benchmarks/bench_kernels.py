#!/usr/bin/env python3
"""Benchmark the compiled quantization kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [N]

Times nearest-code mapping and bit pack/unpack for every bit-width on N
random weights (default 10^6) and prints a per-backend table. Also verifies
the two backends produce identical codes and bytes on the benchmark inputs.
"""

from __future__ import annotations

import sys
import time

import numpy as np

from mpquant import kernels


def time_call(fn, *args, repeat: int = 5) -> float:
    fn(*args)  # warmup
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> int:
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 1_000_000
    rng = np.random.default_rng(0)
    values = rng.normal(0.0, 0.3, size=n)
    backends = kernels.available_backends()
    print(f"active backend: {kernels.BACKEND}; available: {sorted(backends)}")
    print(f"{'op':<14}{'bits':>5}" + "".join(f"{name:>14}" for name in backends) + "  speedup")

    for bits in (1, 2, 4, 8):
        alpha = 0.1
        rows = {}
        outputs = {}
        for name, mod in backends.items():
            rows[name] = time_call(mod.quantize_codes, values, alpha, bits)
            outputs[name] = mod.quantize_codes(values, alpha, bits)
        _check_equal(outputs, f"quantize_codes bits={bits}")
        _print_row("quantize", bits, rows, backends)

        codes = outputs[kernels.BACKEND]
        rows, outputs = {}, {}
        for name, mod in backends.items():
            rows[name] = time_call(mod.pack_codes, codes, bits)
            outputs[name] = mod.pack_codes(codes, bits)
        _check_equal(outputs, f"pack_codes bits={bits}")
        _print_row("pack", bits, rows, backends)

        packed = outputs[kernels.BACKEND]
        rows, outputs = {}, {}
        for name, mod in backends.items():
            rows[name] = time_call(mod.unpack_codes, packed, bits, n)
            outputs[name] = np.asarray(mod.unpack_codes(packed, bits, n))
        _check_equal(outputs, f"unpack_codes bits={bits}")
        _print_row("unpack", bits, rows, backends)
    return 0


def _check_equal(outputs: dict, what: str):
    vals = list(outputs.values())
    for other in vals[1:]:
        ok = (
            vals[0] == other
            if isinstance(vals[0], bytes)
            else np.array_equal(np.asarray(vals[0]), np.asarray(other))
        )
        if not ok:
            raise SystemExit(f"backend mismatch in {what}")


def _print_row(op: str, bits: int, rows: dict, backends: dict):
    cells = "".join(f"{rows[name] * 1e3:>11.2f} ms" for name in backends)
    if len(rows) > 1:
        names = list(backends)
        speedup = rows[names[0]] / rows[names[-1]]
        extra = f"  {speedup:5.1f}x"
    else:
        extra = "      -"
    print(f"{op:<14}{bits:>5}{cells}{extra}")


if __name__ == "__main__":
    sys.exit(main())
