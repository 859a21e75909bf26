# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the graph-sparse inner loops.

Signatures mirror ``graphdoc._pykernels`` exactly; ``graphdoc.kernels``
picks one of the two at import.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

ctypedef fused real:
    float
    double

cdef uint64_t FNV_OFFSET = 14695981039346656037ULL
cdef uint64_t FNV_PRIME = 1099511628211ULL


def fnv1a_64(bytes data):
    cdef uint64_t h = FNV_OFFSET
    cdef const unsigned char[:] view = data
    cdef Py_ssize_t i
    for i in range(view.shape[0]):
        h ^= view[i]
        h *= FNV_PRIME
    return h


def hash_tokens(list words, uint64_t buckets):
    cdef Py_ssize_t n = len(words)
    out = np.empty(n, dtype=np.int64)
    cdef int64_t[:] o = out
    cdef uint64_t h
    cdef bytes raw
    cdef const unsigned char* p
    cdef Py_ssize_t i, j, m
    for i in range(n):
        raw = (<str>words[i]).encode("utf-8")
        p = raw
        m = len(raw)
        h = FNV_OFFSET
        for j in range(m):
            h ^= p[j]
            h *= FNV_PRIME
        o[i] = <int64_t>(h % buckets)
    return out


def embedding_bag_forward(real[:, ::1] table, const int64_t[::1] ids, const int64_t[::1] offsets):
    cdef Py_ssize_t n_bags = offsets.shape[0] - 1
    cdef Py_ssize_t d = table.shape[1]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n_bags, d), dtype=dtype)
    cdef real[:, ::1] o = out
    cdef Py_ssize_t p, t, k, row
    cdef Py_ssize_t lo, hi
    cdef real inv
    for p in range(n_bags):
        lo = offsets[p]
        hi = offsets[p + 1]
        if hi <= lo:
            continue
        for t in range(lo, hi):
            row = ids[t]
            for k in range(d):
                o[p, k] += table[row, k]
        inv = 1.0 / (hi - lo)
        for k in range(d):
            o[p, k] *= inv
    return out


def embedding_bag_backward(real[:, ::1] grad, const int64_t[::1] ids, const int64_t[::1] offsets,
                           Py_ssize_t n_rows):
    cdef Py_ssize_t n_bags = offsets.shape[0] - 1
    cdef Py_ssize_t d = grad.shape[1]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n_rows, d), dtype=dtype)
    cdef real[:, ::1] o = out
    cdef Py_ssize_t p, t, k, row, lo, hi
    cdef real inv
    for p in range(n_bags):
        lo = offsets[p]
        hi = offsets[p + 1]
        if hi <= lo:
            continue
        inv = 1.0 / (hi - lo)
        for t in range(lo, hi):
            row = ids[t]
            for k in range(d):
                o[row, k] += grad[p, k] * inv
    return out


def gat_forward(real[:, ::1] z, real[::1] a, const int64_t[::1] indptr,
                const int64_t[::1] indices, double slope):
    cdef Py_ssize_t n = z.shape[0]
    cdef Py_ssize_t dh = z.shape[1]
    cdef Py_ssize_t n_edges = indices.shape[0]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, dh), dtype=dtype)
    alpha = np.empty(n_edges, dtype=dtype)
    s_self = np.empty(n, dtype=dtype)
    s_nb = np.empty(n, dtype=dtype)
    cdef real[:, ::1] o = out
    cdef real[::1] al = alpha
    cdef real[::1] s1 = s_self
    cdef real[::1] s2 = s_nb
    cdef Py_ssize_t i, j, e, k, lo, hi
    cdef real acc1, acc2, pre, m, den
    for i in range(n):
        acc1 = 0
        acc2 = 0
        for k in range(dh):
            acc1 += z[i, k] * a[k]
            acc2 += z[i, k] * a[dh + k]
        s1[i] = acc1
        s2[i] = acc2
    for i in range(n):
        lo = indptr[i]
        hi = indptr[i + 1]
        if hi <= lo:
            raise ValueError("node %d has an empty neighbourhood" % i)
        m = s1[i] + s2[indices[lo]]
        if m < 0:
            m = m * slope
        for e in range(lo, hi):
            pre = s1[i] + s2[indices[e]]
            if pre < 0:
                pre = pre * slope
            al[e] = pre
            if pre > m:
                m = pre
        den = 0
        for e in range(lo, hi):
            al[e] = exp(al[e] - m)
            den += al[e]
        for e in range(lo, hi):
            al[e] = al[e] / den
            j = indices[e]
            for k in range(dh):
                o[i, k] += al[e] * z[j, k]
    return out, alpha


def gat_backward(real[:, ::1] grad_out, real[:, ::1] z, real[::1] a, real[::1] alpha,
                 const int64_t[::1] indptr, const int64_t[::1] indices, double slope):
    cdef Py_ssize_t n = z.shape[0]
    cdef Py_ssize_t dh = z.shape[1]
    dtype = np.float32 if real is float else np.float64
    dz_arr = np.zeros((n, dh), dtype=dtype)
    da_arr = np.zeros(2 * dh, dtype=dtype)
    s1_arr = np.empty(n, dtype=dtype)
    s2_arr = np.empty(n, dtype=dtype)
    ds1_arr = np.zeros(n, dtype=dtype)
    ds2_arr = np.zeros(n, dtype=dtype)
    dal_arr = np.empty(alpha.shape[0], dtype=dtype)
    cdef real[:, ::1] dz = dz_arr
    cdef real[::1] da = da_arr
    cdef real[::1] s1 = s1_arr
    cdef real[::1] s2 = s2_arr
    cdef real[::1] ds1 = ds1_arr
    cdef real[::1] ds2 = ds2_arr
    cdef real[::1] dal = dal_arr
    cdef Py_ssize_t i, j, e, k, lo, hi
    cdef real acc1, acc2, s, pre, de
    for i in range(n):
        acc1 = 0
        acc2 = 0
        for k in range(dh):
            acc1 += z[i, k] * a[k]
            acc2 += z[i, k] * a[dh + k]
        s1[i] = acc1
        s2[i] = acc2
    for i in range(n):
        lo = indptr[i]
        hi = indptr[i + 1]
        s = 0
        for e in range(lo, hi):
            j = indices[e]
            acc1 = 0
            for k in range(dh):
                acc1 += grad_out[i, k] * z[j, k]
                dz[j, k] += alpha[e] * grad_out[i, k]
            dal[e] = acc1
            s += alpha[e] * acc1
        for e in range(lo, hi):
            j = indices[e]
            de = alpha[e] * (dal[e] - s)
            pre = s1[i] + s2[j]
            if pre < 0:
                de = de * slope
            ds1[i] += de
            ds2[j] += de
    for i in range(n):
        for k in range(dh):
            dz[i, k] += ds1[i] * a[k] + ds2[i] * a[dh + k]
            da[k] += z[i, k] * ds1[i]
            da[dh + k] += z[i, k] * ds2[i]
    return dz_arr, da_arr
