# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled quantization kernels.

Mirrors the numpy fallback in ``_kernels_py.py`` exactly; the two must stay
interchangeable (same codes, same bytes) for any input.
"""

from libc.math cimport fabs, rint

import numpy as np

BACKEND_NAME = "cython"


def quantize_codes(values, double alpha, int bits):
    values = np.ascontiguousarray(values, dtype=np.float64)
    cdef double[::1] v = values
    cdef Py_ssize_t n = v.shape[0]
    out = np.empty(n, dtype=np.int8)
    cdef signed char[::1] o = out
    cdef Py_ssize_t i
    cdef double x, err, best_err, cv
    cdef long vmax, hint, best, cand, d

    if bits == 1:
        for i in range(n):
            o[i] = 1 if v[i] > 0.0 else -1
        return out

    vmax = (1 << (bits - 1)) - 1
    for i in range(n):
        x = rint(v[i] / alpha)
        if x > vmax:
            hint = vmax
        elif x < -vmax:
            hint = -vmax
        else:
            hint = <long> x
        best = hint - 1
        if best < -vmax:
            best = -vmax
        best_err = fabs(v[i] - alpha * best)
        for d in range(2):
            cand = hint + d
            if cand > vmax:
                cand = vmax
            err = fabs(v[i] - alpha * cand)
            if err < best_err or (
                err == best_err
                and (
                    labs(cand) < labs(best)
                    or (labs(cand) == labs(best) and cand < best)
                )
            ):
                best = cand
                best_err = err
        o[i] = <signed char> best
    return out


cdef inline long labs(long x):
    return -x if x < 0 else x


def pack_codes(codes, int bits):
    codes = np.ascontiguousarray(codes, dtype=np.int8)
    cdef signed char[::1] c = codes
    cdef Py_ssize_t n = c.shape[0]
    cdef int per, offset, j
    cdef Py_ssize_t i, b, full, nb
    cdef unsigned char acc

    if bits == 8:
        return codes.tobytes()
    per = 8 // bits
    offset = (1 << (bits - 1)) - 1 if bits > 1 else 0
    nb = (n + per - 1) // per
    full = n // per
    out = np.zeros(nb, dtype=np.uint8)
    cdef unsigned char[::1] o = out
    if bits == 1:
        for b in range(full):
            i = b << 3
            acc = 0
            for j in range(8):
                acc |= (<unsigned char> (c[i + j] > 0)) << j
            o[b] = acc
        if full < nb:
            acc = 0
            for j in range(<int> (n - (full << 3))):
                acc |= (<unsigned char> (c[(full << 3) + j] > 0)) << j
            o[full] = acc
    else:
        for b in range(full):
            i = b * per
            acc = 0
            for j in range(per):
                acc |= <unsigned char> ((c[i + j] + offset) << (bits * j))
            o[b] = acc
        if full < nb:
            acc = 0
            for j in range(<int> (n - full * per)):
                acc |= <unsigned char> ((c[full * per + j] + offset) << (bits * j))
            o[full] = acc
    return out.tobytes()


def unpack_codes(buf, int bits, Py_ssize_t count):
    raw = np.frombuffer(buf, dtype=np.uint8)
    cdef const unsigned char[::1] r = raw
    out = np.empty(count, dtype=np.int8)
    cdef signed char[::1] o = out
    cdef Py_ssize_t i, b, full
    cdef int per, offset, fmask, j
    cdef unsigned char byte

    if bits == 8:
        for i in range(count):
            o[i] = <signed char> r[i]
        return out
    if bits == 1:
        full = count >> 3
        for b in range(full):
            byte = r[b]
            i = b << 3
            for j in range(8):
                o[i + j] = 1 if (byte >> j) & 1 else -1
        byte = r[full] if full < r.shape[0] else 0
        for j in range(<int> (count - (full << 3))):
            o[(full << 3) + j] = 1 if (byte >> j) & 1 else -1
        return out
    per = 8 // bits
    offset = (1 << (bits - 1)) - 1
    fmask = (1 << bits) - 1
    full = count // per
    for b in range(full):
        byte = r[b]
        i = b * per
        for j in range(per):
            o[i + j] = <signed char> (((byte >> (bits * j)) & fmask) - offset)
    if full * per < count:
        byte = r[full]
        for j in range(<int> (count - full * per)):
            o[full * per + j] = <signed char> (((byte >> (bits * j)) & fmask) - offset)
    return out
