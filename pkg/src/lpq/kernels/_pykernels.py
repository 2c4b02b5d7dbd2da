"""Pure numpy implementation of the hot kernels.

Each reduction walks its axis left to right, rounding after every step, and
vectorizes only across independent outputs. That makes the results identical
to the compiled core in ``_ckernels.pyx``.
"""

import numpy as np

NAME = "python"
_HALF_MAX = 65504.0


def round_half(v):
    """Round float64 values to binary16 (saturating, gradual underflow, NaN kept)."""
    a = np.abs(v)
    _, e = np.frexp(a)
    exp = np.maximum(e.astype(np.int64) - 1, -14)
    q = np.ldexp(np.rint(np.ldexp(a, 10 - exp)), exp - 10)
    return np.copysign(np.minimum(q, _HALF_MAX), v)


def matmul_fp32(x, w):
    m, n = x.shape
    k = w.shape[1]
    acc = np.zeros((m, k), dtype=np.float32)
    for t in range(n):
        acc += x[:, t, None] * w[None, t, :]
    return acc


def matmul_fp16(xh, wh, accum16):
    """Operands already on the half grid; each product rounded to half."""
    m, n = xh.shape
    k = wh.shape[1]
    xd = xh.astype(np.float64)
    wd = wh.astype(np.float64)
    if accum16:
        acc = np.zeros((m, k), dtype=np.float64)
        for t in range(n):
            acc = round_half(acc + round_half(xd[:, t, None] * wd[None, t, :]))
        return acc.astype(np.float32)
    acc = np.zeros((m, k), dtype=np.float32)
    for t in range(n):
        acc += round_half(xd[:, t, None] * wd[None, t, :]).astype(np.float32)
    return acc


def bmm_fp32(a, c):
    b, p, q = a.shape
    r = c.shape[2]
    acc = np.zeros((b, p, r), dtype=np.float32)
    for t in range(q):
        acc += a[:, :, t, None] * c[:, None, t, :]
    return acc


def bmm_fp16(ah, ch, accum16):
    b, p, q = ah.shape
    r = ch.shape[2]
    ad = ah.astype(np.float64)
    cd = ch.astype(np.float64)
    if accum16:
        acc = np.zeros((b, p, r), dtype=np.float64)
        for t in range(q):
            acc = round_half(acc + round_half(ad[:, :, t, None] * cd[:, None, t, :]))
        return acc.astype(np.float32)
    acc = np.zeros((b, p, r), dtype=np.float32)
    for t in range(q):
        acc += round_half(ad[:, :, t, None] * cd[:, None, t, :]).astype(np.float32)
    return acc


def _positions(offsets):
    """Padded (m, L) matrix of positions into the flat id array plus a validity mask."""
    lengths = np.diff(offsets)
    width = int(lengths.max()) if lengths.size else 0
    col = np.arange(width)
    mask = col[None, :] < lengths[:, None]
    pos = np.where(mask, offsets[:-1, None] + col[None, :], 0)
    return pos, mask


def _pool(rows_at, m, d, offsets, ids, accum16):
    pos, mask = _positions(offsets)
    if accum16:
        acc = np.zeros((m, d), dtype=np.float64)
    else:
        acc = np.zeros((m, d), dtype=np.float32)
    if ids.size == 0:
        return acc.astype(np.float32)
    for col in range(pos.shape[1]):
        live = mask[:, col]
        val = rows_at(ids[pos[:, col]])
        if accum16:
            nxt = round_half(acc + round_half(val.astype(np.float64)))
        else:
            nxt = acc + val
        acc = np.where(live[:, None], nxt, acc)
    return acc.astype(np.float32)


def sls_fp32(table, offsets, ids, accum16):
    m = offsets.size - 1
    return _pool(lambda r: table[r], m, table.shape[1], offsets, ids, accum16)


def sls_rowwise(codes, scales, biases, dim, bits, offsets, ids, accum16):
    m = offsets.size - 1

    def rows_at(r):
        c = codes[r]
        if bits == 4:
            q = np.empty((c.shape[0], 2 * c.shape[1]), dtype=np.uint8)
            q[:, 0::2] = c & 0x0F
            q[:, 1::2] = c >> 4
            c = q[:, :dim]
        # scale * q + bias in fp64, rounded once to fp32
        s64 = scales[r, None].astype(np.float64)
        return (s64 * c.astype(np.float64) + biases[r, None].astype(np.float64)).astype(np.float32)

    return _pool(rows_at, m, dim, offsets, ids, accum16)
