"""Scalar-loop kernels written in the subset numba compiles (numba path only).

Every argument is an int64/float32 array so numba never mixes signed and
unsigned 64-bit integers (that promotes to float64).
"""
import numba
import numpy as np

_helper = numba.njit(cache=True, inline="always")


@_helper
def _parity64(x):
    x ^= x >> 32
    x ^= x >> 16
    x ^= x >> 8
    x ^= x >> 4
    x ^= x >> 2
    x ^= x >> 1
    return x & 1


def secded_encode_batch(data, data_pos, covers, parity):
    out = np.empty(data.shape[0], np.int64)
    for m in range(data.shape[0]):
        d = data[m]
        cw = 0
        for i in range(data_pos.shape[0]):
            if (d >> i) & 1:
                cw |= 1 << data_pos[i]
        for i in range(covers.shape[0]):
            if _parity64(cw & covers[i]) != parity:
                cw |= 1 << (1 << i)
        if _parity64(cw) != parity:
            cw |= 1
        out[m] = cw
    return out


def secded_decode_batch(codewords, data_pos, covers, n, parity):
    """Return (data, status, position); status 0 clean, 1 corrected, 2 double."""
    size = codewords.shape[0]
    data = np.empty(size, np.int64)
    status = np.zeros(size, np.int8)
    position = np.full(size, -1, np.int64)
    for m in range(size):
        cw = codewords[m]
        syn = 0
        for i in range(covers.shape[0]):
            if _parity64(cw & covers[i]) != parity:
                syn |= 1 << i
        bad = _parity64(cw) != parity
        if bad:
            if syn > n:
                status[m] = 2
            else:
                cw ^= 1 << syn
                status[m] = 1
                position[m] = syn
        elif syn != 0:
            status[m] = 2
        d = 0
        for i in range(data_pos.shape[0]):
            d |= ((cw >> data_pos[i]) & 1) << i
        data[m] = d
    return data, status, position


def masked_wrap_sums(bits, mask, width):
    rows, cols = bits.shape
    modmask = (1 << width) - 1
    row = np.zeros(rows, np.int64)
    col = np.zeros(cols, np.int64)
    for r in range(rows):
        for c in range(cols):
            v = bits[r, c] & mask
            row[r] += v
            col[c] += v
    for r in range(rows):
        row[r] &= modmask
    for c in range(cols):
        col[c] &= modmask
    return row, col


@_helper
def _to_signed32(u):
    u &= 0xFFFFFFFF
    if u >= 0x80000000:
        return u - 0x100000000
    return u


def array_gemm_int(a_bits, b, d, ain_xor, ain_or, ain_andn,
                   ps_xor, ps_or, ps_andn, ws):
    """INT8 x INT8 -> INT32 systolic product with per-PE fault masks.

    ``a_bits`` holds 8-bit patterns.  ``ain_*`` corrupt the activation
    register of each PE it passes on its row, ``ps_*`` the accumulated value
    leaving a PE.  Index layout of the 3-D masks is ``[i, k, j]``; the PE
    coordinates are ``(k, j)`` in WS mode and ``(i, j)`` in OS mode.
    """
    n = a_bits.shape[0]
    aeff = np.empty((n, n, n), np.int64)
    for i in range(n):
        for k in range(n):
            u = a_bits[i, k]
            for j in range(n):
                if ws:
                    pr = k
                else:
                    pr = i
                u = ((u ^ ain_xor[i, k, j]) | ain_or[pr, j]) & ~ain_andn[pr, j] & 0xFF
                if u >= 128:
                    aeff[i, k, j] = u - 256
                else:
                    aeff[i, k, j] = u
    c = np.empty((n, n), np.int64)
    for i in range(n):
        for j in range(n):
            if ws:
                acc = 0
            else:
                acc = d[i, j]
            for k in range(n):
                acc = _to_signed32(acc + aeff[i, k, j] * b[k, j])
                if ws:
                    pr = k
                else:
                    pr = i
                x = ps_xor[i, k, j]
                o = ps_or[pr, j]
                an = ps_andn[pr, j]
                if x != 0 or o != 0 or an != 0:
                    acc = _to_signed32(((acc ^ x) | o) & ~an)
            if ws:
                acc = _to_signed32(acc + d[i, j])
            c[i, j] = acc
    return c


def array_gemm_float(a_bits, b, d, ain_xor, ain_or, ain_andn,
                     ps_xor, ps_or, ps_andn, ws):
    """Float variant; ``a_bits`` are binary32 patterns, accumulation in float32."""
    n = a_bits.shape[0]
    buf = np.zeros(1, np.float32)
    ubuf = buf.view(np.uint32)
    aeff = np.empty((n, n, n), np.float32)
    for i in range(n):
        for k in range(n):
            u = a_bits[i, k]
            for j in range(n):
                if ws:
                    pr = k
                else:
                    pr = i
                u = ((u ^ ain_xor[i, k, j]) | ain_or[pr, j]) & ~ain_andn[pr, j] & 0xFFFFFFFF
                ubuf[0] = u
                aeff[i, k, j] = buf[0]
    # NaN payloads depend on operand order chosen by the compiler; pin them
    qnan = np.float32(np.nan)
    c = np.empty((n, n), np.float32)
    for i in range(n):
        for j in range(n):
            if ws:
                acc = np.float32(0.0)
            else:
                acc = d[i, j]
            for k in range(n):
                prod = np.float32(aeff[i, k, j] * b[k, j])
                acc = np.float32(acc + prod)
                if acc != acc:
                    acc = qnan
                if ws:
                    pr = k
                else:
                    pr = i
                x = ps_xor[i, k, j]
                o = ps_or[pr, j]
                an = ps_andn[pr, j]
                if x != 0 or o != 0 or an != 0:
                    buf[0] = acc
                    u = np.int64(ubuf[0])
                    ubuf[0] = ((u ^ x) | o) & ~an & 0xFFFFFFFF
                    acc = buf[0]
            if ws:
                acc = np.float32(acc + d[i, j])
                if acc != acc:
                    acc = qnan
            c[i, j] = acc
    return c
