"""Pure numpy implementations of the compiled kernels in ``_kernels.pyx``."""

from __future__ import annotations

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)


def _philox_rounds(c0, c1, c2, c3, key):
    k0 = int(key) & 0xFFFFFFFF
    k1 = (int(key) >> 32) & 0xFFFFFFFF
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> _SHIFT) ^ c1 ^ np.uint64(k0),
            p1 & _MASK,
            (p0 >> _SHIFT) ^ c3 ^ np.uint64(k1),
            p0 & _MASK,
        )
        k0 = (k0 + _W0) & 0xFFFFFFFF
        k1 = (k1 + _W1) & 0xFFFFFFFF
    return c0, c1, c2, c3


def philox4x32(counters: np.ndarray, key: int) -> np.ndarray:
    c = np.asarray(counters, dtype=np.uint64)
    out = _philox_rounds(c[:, 0], c[:, 1], c[:, 2], c[:, 3], key)
    return np.stack(out, axis=1).astype(np.uint32)


def _u53(hi, lo):
    v = (hi << _SHIFT) | lo
    return ((v >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def _uniform_blocks(seed, stream, step, start, count, width):
    nblocks = (width + 1) // 2
    idx = (np.arange(start, start + count, dtype=np.uint64) & _MASK)[:, None]
    blk = np.arange(nblocks, dtype=np.uint64)[None, :]
    c0 = np.broadcast_to(idx, (count, nblocks))
    c1 = np.full((count, nblocks), step, dtype=np.uint64)
    c2 = np.broadcast_to(blk, (count, nblocks))
    c3 = np.full((count, nblocks), stream, dtype=np.uint64)
    r0, r1, r2, r3 = _philox_rounds(c0, c1, c2, c3, seed)
    return _u53(r0, r1), _u53(r2, r3)


def uniforms(seed, stream, step, start, count, width):
    a, b = _uniform_blocks(seed, stream, step, start, count, width)
    out = np.empty((count, a.shape[1] * 2))
    out[:, 0::2] = a
    out[:, 1::2] = b
    return out[:, :width]


def normals(seed, stream, step, start, count, width):
    u1, u2 = _uniform_blocks(seed, stream, step, start, count, width)
    rad = np.sqrt(-2.0 * np.log(u1))
    ang = 2.0 * np.pi * u2
    out = np.empty((count, u1.shape[1] * 2))
    out[:, 0::2] = rad * np.cos(ang)
    out[:, 1::2] = rad * np.sin(ang)
    return out[:, :width]


def cic_deposit(points, weights, h, origin, shape):
    points = np.asarray(points, dtype=np.float64)
    n, d = points.shape
    if d > 3:
        raise ValueError("cic_deposit supports d <= 3")
    shape = np.asarray(shape, dtype=np.int64)
    s = points / h
    base = np.floor(s)
    frac = s - base
    base = base.astype(np.int64) - np.asarray(origin, dtype=np.int64)
    strides = np.ones(d, dtype=np.int64)
    for k in range(d - 2, -1, -1):
        strides[k] = strides[k + 1] * shape[k + 1]
    grid = np.zeros(int(np.prod(shape)))
    for corner in range(1 << d):
        wgt = np.array(weights, dtype=np.float64, copy=True)
        flat = np.zeros(n, dtype=np.int64)
        for k in range(d):
            if (corner >> k) & 1:
                wgt = wgt * frac[:, k]
                flat += (base[:, k] + 1) * strides[k]
            else:
                wgt = wgt * (1.0 - frac[:, k])
                flat += base[:, k] * strides[k]
        grid += np.bincount(flat, weights=wgt, minlength=grid.size)
    return grid


def kde_gauss(samples, weights, points, bandwidth, chunk=4096):
    samples = np.asarray(samples, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    d = samples.shape[1]
    norm = (2.0 * np.pi * bandwidth**2) ** (0.5 * d)
    vals = np.zeros(points.shape[0])
    sq = np.zeros(points.shape[0])
    for lo in range(0, samples.shape[0], chunk):
        blk = samples[lo : lo + chunk]
        w = weights[lo : lo + chunk]
        r2 = ((blk[None, :, :] - points[:, None, :]) ** 2).sum(axis=2)
        kv = np.exp(-r2 / (2.0 * bandwidth**2)) / norm
        vals += kv @ w
        sq += (kv * kv) @ w
    return vals, sq
