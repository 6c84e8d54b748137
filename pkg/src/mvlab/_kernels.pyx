# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: Philox normals, cloud-in-cell deposit, Gaussian KDE sums.

Every routine here has a numpy twin in ``_fallback.py`` with the same
signature. Uniform draws agree bit for bit; normals and float reductions agree
to a few ulps (libm vs numpy transcendental implementations).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, log, cos, sin, exp, floor, M_PI
from libc.stdint cimport uint32_t, uint64_t, int64_t

cnp.import_array()

cdef uint32_t PH_M0 = 0xD2511F53
cdef uint32_t PH_M1 = 0xCD9E8D57
cdef uint32_t PH_W0 = 0x9E3779B9
cdef uint32_t PH_W1 = 0xBB67AE85


cdef inline void _philox(uint32_t* ctr, uint32_t k0, uint32_t k1, uint32_t* out) nogil:
    cdef uint32_t c0 = ctr[0], c1 = ctr[1], c2 = ctr[2], c3 = ctr[3]
    cdef uint64_t p0, p1
    cdef int r
    for r in range(10):
        p0 = <uint64_t>PH_M0 * <uint64_t>c0
        p1 = <uint64_t>PH_M1 * <uint64_t>c2
        c0 = <uint32_t>(p1 >> 32) ^ c1 ^ k0
        c1 = <uint32_t>p1
        c2 = <uint32_t>(p0 >> 32) ^ c3 ^ k1
        c3 = <uint32_t>p0
        k0 = k0 + PH_W0
        k1 = k1 + PH_W1
    out[0] = c0
    out[1] = c1
    out[2] = c2
    out[3] = c3


def philox4x32(const cnp.uint32_t[:, ::1] counters, uint64_t key):
    """Raw Philox4x32-10 blocks for an (n, 4) array of counters."""
    cdef Py_ssize_t n = counters.shape[0], i
    out = np.empty((n, 4), dtype=np.uint32)
    cdef cnp.uint32_t[:, ::1] o = out
    cdef uint32_t k0 = <uint32_t>(key & 0xFFFFFFFF)
    cdef uint32_t k1 = <uint32_t>(key >> 32)
    with nogil:
        for i in range(n):
            _philox(&counters[i, 0], k0, k1, &o[i, 0])
    return out


cdef inline double _u53(uint32_t hi, uint32_t lo) nogil:
    cdef uint64_t v = ((<uint64_t>hi) << 32) | <uint64_t>lo
    return (<double>(v >> 11) + 0.5) * (1.0 / 9007199254740992.0)


def uniforms(uint64_t seed, uint32_t stream, uint32_t step, int64_t start, int64_t count, int width):
    """(count, width) open-interval uniforms keyed by (seed, stream, step, index)."""
    cdef int64_t i
    cdef int j, nblocks = (width + 1) // 2, b
    cdef uint32_t ctr[4]
    cdef uint32_t blk[4]
    cdef uint32_t k0 = <uint32_t>(seed & 0xFFFFFFFF)
    cdef uint32_t k1 = <uint32_t>(seed >> 32)
    out = np.empty((count, 2 * nblocks), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(count):
            for b in range(nblocks):
                ctr[0] = <uint32_t>(start + i)
                ctr[1] = step
                ctr[2] = <uint32_t>b
                ctr[3] = stream
                _philox(ctr, k0, k1, blk)
                o[i, 2 * b] = _u53(blk[0], blk[1])
                o[i, 2 * b + 1] = _u53(blk[2], blk[3])
    return out[:, :width]


def normals(uint64_t seed, uint32_t stream, uint32_t step, int64_t start, int64_t count, int width):
    """(count, width) standard normals via Box-Muller on Philox uniforms."""
    cdef int64_t i
    cdef int nblocks = (width + 1) // 2, b
    cdef uint32_t ctr[4]
    cdef uint32_t blk[4]
    cdef uint32_t k0 = <uint32_t>(seed & 0xFFFFFFFF)
    cdef uint32_t k1 = <uint32_t>(seed >> 32)
    cdef double u1, u2, rad
    out = np.empty((count, 2 * nblocks), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(count):
            for b in range(nblocks):
                ctr[0] = <uint32_t>(start + i)
                ctr[1] = step
                ctr[2] = <uint32_t>b
                ctr[3] = stream
                _philox(ctr, k0, k1, blk)
                u1 = _u53(blk[0], blk[1])
                u2 = _u53(blk[2], blk[3])
                rad = sqrt(-2.0 * log(u1))
                o[i, 2 * b] = rad * cos(2.0 * M_PI * u2)
                o[i, 2 * b + 1] = rad * sin(2.0 * M_PI * u2)
    return out[:, :width]


def cic_deposit(const double[:, ::1] points, const double[::1] weights, double h, const cnp.int64_t[::1] origin, const cnp.int64_t[::1] shape):
    """Cloud-in-cell mass deposit onto the lattice h*(origin + index), flattened C order."""
    cdef Py_ssize_t n = points.shape[0], i
    cdef int d = points.shape[1], k, corner, ncorner = 1 << d
    cdef Py_ssize_t total = 1, flat, stride
    for k in range(d):
        total *= shape[k]
    grid = np.zeros(total, dtype=np.float64)
    cdef double[::1] g = grid
    cdef cnp.int64_t base[3]
    cdef double frac[3]
    cdef double s, wgt
    if d > 3:
        raise ValueError("cic_deposit supports d <= 3")
    with nogil:
        for i in range(n):
            for k in range(d):
                s = points[i, k] / h
                base[k] = <cnp.int64_t>floor(s)
                frac[k] = s - <double>base[k]
                base[k] -= origin[k]
            for corner in range(ncorner):
                wgt = weights[i]
                flat = 0
                stride = 1
                for k in range(d - 1, -1, -1):
                    if (corner >> k) & 1:
                        wgt *= frac[k]
                        flat += (base[k] + 1) * stride
                    else:
                        wgt *= 1.0 - frac[k]
                        flat += base[k] * stride
                    stride *= shape[k]
                g[flat] += wgt
    return grid


def kde_gauss(const double[:, ::1] samples, const double[::1] weights, const double[:, ::1] points, double bandwidth):
    """Weighted isotropic Gaussian KDE evaluated at points; returns (values, second moments)."""
    cdef Py_ssize_t n = samples.shape[0], m = points.shape[0], i, j
    cdef int d = samples.shape[1], k
    cdef double norm = (2.0 * M_PI * bandwidth * bandwidth) ** (0.5 * d)
    cdef double inv2h2 = 1.0 / (2.0 * bandwidth * bandwidth)
    cdef double r2, diff, kv, acc, acc2
    vals = np.empty(m, dtype=np.float64)
    sq = np.empty(m, dtype=np.float64)
    cdef double[::1] v = vals
    cdef double[::1] q = sq
    with nogil:
        for j in range(m):
            acc = 0.0
            acc2 = 0.0
            for i in range(n):
                r2 = 0.0
                for k in range(d):
                    diff = samples[i, k] - points[j, k]
                    r2 += diff * diff
                kv = exp(-r2 * inv2h2) / norm
                acc += weights[i] * kv
                acc2 += weights[i] * kv * kv
            v[j] = acc
            q[j] = acc2
    return vals, sq
