# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Must stay bit-identical to ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t

cnp.import_array()

cdef uint64_t FNV_OFFSET = 14695981039346656037ULL
cdef uint64_t FNV_PRIME = 1099511628211ULL


def fnv1a64(const unsigned char[:] data):
    cdef uint64_t h = FNV_OFFSET
    cdef Py_ssize_t i
    for i in range(data.shape[0]):
        h ^= data[i]
        h *= FNV_PRIME
    return h


def weighted_draws(const double[:] weights, const double[:] uniforms):
    cdef Py_ssize_t n = weights.shape[0]
    cdef Py_ssize_t k = uniforms.shape[0]
    cdef double[:] pool = np.array(weights, dtype=np.float64)
    out_arr = np.empty(k, dtype=np.int64)
    cdef long long[:] out = out_arr
    cdef Py_ssize_t t, i, chosen, last
    cdef double total, target, acc
    for t in range(k):
        total = 0.0
        for i in range(n):
            total += pool[i]
        target = uniforms[t] * total
        acc = 0.0
        chosen = -1
        last = -1
        for i in range(n):
            if pool[i] > 0.0:
                last = i
                acc += pool[i]
                if target < acc:
                    chosen = i
                    break
        if chosen < 0:
            chosen = last
        out[t] = chosen
        pool[chosen] = 0.0
    return out_arr


def glass_shuffle(double[:, :, ::1] img, Py_ssize_t radius, const long long[:, :, :, ::1] offsets):
    cdef Py_ssize_t height = img.shape[0]
    cdef Py_ssize_t width = img.shape[1]
    cdef Py_ssize_t channels = img.shape[2]
    cdef Py_ssize_t it, a, b, h, w, hp, wp, c
    cdef double tmp
    for it in range(offsets.shape[0]):
        for a in range(offsets.shape[1]):
            h = height - radius - a
            for b in range(offsets.shape[2]):
                w = width - radius - b
                hp = h + offsets[it, a, b, 0]
                wp = w + offsets[it, a, b, 1]
                for c in range(channels):
                    tmp = img[h, w, c]
                    img[h, w, c] = img[hp, wp, c]
                    img[hp, wp, c] = tmp
