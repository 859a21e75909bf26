"""numpy/scipy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable or when
``GRAPHDOC_PURE_PYTHON=1`` is set. Signatures match the extension.
"""
import numpy as np
import scipy.sparse as sp

_FNV_OFFSET = 14695981039346656037
_FNV_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def hash_tokens(words: list, buckets: int) -> np.ndarray:
    return np.fromiter(
        (fnv1a_64(w.encode("utf-8")) % buckets for w in words),
        dtype=np.int64,
        count=len(words),
    )


def _bag_matrix(ids, offsets, n_rows, dtype):
    counts = np.diff(offsets)
    inv = np.zeros(len(counts), dtype=dtype)
    nz = counts > 0
    inv[nz] = 1.0 / counts[nz]
    weights = np.repeat(inv, counts)
    return sp.csr_matrix((weights, ids, offsets), shape=(len(counts), n_rows))


def embedding_bag_forward(table, ids, offsets):
    bag = _bag_matrix(ids, offsets, table.shape[0], table.dtype)
    return np.ascontiguousarray(bag @ table, dtype=table.dtype)


def embedding_bag_backward(grad, ids, offsets, n_rows):
    bag = _bag_matrix(ids, offsets, n_rows, grad.dtype)
    return np.ascontiguousarray(bag.T @ grad, dtype=grad.dtype)


def _edge_rows(indptr):
    counts = np.diff(indptr)
    if np.any(counts <= 0):
        raise ValueError("node %d has an empty neighbourhood" % int(np.argmin(counts)))
    return np.repeat(np.arange(len(counts)), counts)


def gat_forward(z, a, indptr, indices, slope):
    n, dh = z.shape
    rows = _edge_rows(indptr)
    s1 = z @ a[:dh]
    s2 = z @ a[dh:]
    pre = s1[rows] + s2[indices]
    e = np.where(pre < 0, pre * slope, pre)
    starts = indptr[:-1]
    m = np.maximum.reduceat(e, starts)
    ex = np.exp(e - m[rows])
    alpha = ex / np.add.reduceat(ex, starts)[rows]
    att = sp.csr_matrix((alpha, indices, indptr), shape=(n, n))
    out = np.ascontiguousarray(att @ z, dtype=z.dtype)
    return out, alpha.astype(z.dtype, copy=False)


def gat_backward(grad_out, z, a, alpha, indptr, indices, slope):
    n, dh = z.shape
    rows = _edge_rows(indptr)
    starts = indptr[:-1]
    att = sp.csr_matrix((alpha, indices, indptr), shape=(n, n))
    dz = np.asarray(att.T @ grad_out)
    dalpha = np.einsum("ek,ek->e", grad_out[rows], z[indices])
    s = np.add.reduceat(alpha * dalpha, starts)
    de = alpha * (dalpha - s[rows])
    pre = (z @ a[:dh])[rows] + (z @ a[dh:])[indices]
    de = np.where(pre < 0, de * slope, de)
    ds1 = np.add.reduceat(de, starts)
    ds2 = np.bincount(indices, weights=de, minlength=n).astype(z.dtype, copy=False)
    dz = dz + np.outer(ds1, a[:dh]) + np.outer(ds2, a[dh:])
    da = np.concatenate([z.T @ ds1, z.T @ ds2])
    return np.ascontiguousarray(dz, dtype=z.dtype), da.astype(z.dtype, copy=False)
