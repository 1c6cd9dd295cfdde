"""Pure-numpy implementations of the hot quantization kernels.

Semantics are identical to the compiled extension in ``_kernels.pyx``;
``mpquant.kernels`` picks whichever is importable. Keep both in sync.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"


def quantize_codes(values: np.ndarray, alpha: float, bits: int) -> np.ndarray:
    """Map each value to the integer code minimizing |value - alpha*code|.

    Codebooks: bits==1 -> codes {-1,+1}; bits>=2 -> codes in
    [-(2**(bits-1)-1), +(2**(bits-1)-1)]. Ties prefer the code of smaller
    absolute value, then the negative one, so results are bit-deterministic.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    if bits == 1:
        # |v - a| < |v + a| iff v > 0; v == 0 ties toward the negative code.
        return np.where(values > 0.0, 1, -1).astype(np.int8)

    vmax = (1 << (bits - 1)) - 1
    hint = np.clip(np.rint(values / alpha), -vmax, vmax)
    best = np.clip(hint - 1.0, -vmax, vmax)
    best_err = np.abs(values - alpha * best)
    for delta in (0.0, 1.0):
        cand = np.clip(hint + delta, -vmax, vmax)
        err = np.abs(values - alpha * cand)
        better = err < best_err
        tied = err == best_err
        pref = np.abs(cand) < np.abs(best)
        pref |= (np.abs(cand) == np.abs(best)) & (cand < best)
        take = better | (tied & pref)
        best = np.where(take, cand, best)
        best_err = np.where(take, err, best_err)
    return best.astype(np.int8)


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Pack integer codes into bytes; little-endian fields within each byte."""
    codes = np.ascontiguousarray(codes, dtype=np.int8)
    if bits == 1:
        return np.packbits(codes > 0, bitorder="little").tobytes()
    if bits == 8:
        return codes.tobytes()
    offset = (1 << (bits - 1)) - 1
    per = 8 // bits
    fields = (codes.astype(np.int16) + offset).astype(np.uint8)
    pad = (-len(fields)) % per
    if pad:
        fields = np.concatenate([fields, np.zeros(pad, dtype=np.uint8)])
    fields = fields.reshape(-1, per)
    byte = np.zeros(fields.shape[0], dtype=np.uint8)
    for j in range(per):
        byte |= fields[:, j] << (bits * j)
    return byte.tobytes()


def unpack_codes(buf: bytes, bits: int, count: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`; returns exactly ``count`` codes."""
    raw = np.frombuffer(buf, dtype=np.uint8)
    if bits == 1:
        flags = np.unpackbits(raw, bitorder="little")[:count]
        return np.where(flags == 1, 1, -1).astype(np.int8)
    if bits == 8:
        return raw[:count].view(np.int8).copy()
    offset = (1 << (bits - 1)) - 1
    per = 8 // bits
    fmask = (1 << bits) - 1
    fields = np.empty((raw.size, per), dtype=np.uint8)
    for j in range(per):
        fields[:, j] = (raw >> (bits * j)) & fmask
    codes = fields.reshape(-1)[:count].astype(np.int16) - offset
    return codes.astype(np.int8)
