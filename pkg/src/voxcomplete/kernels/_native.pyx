# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: packed-key hashing, kernel maps, row scatter-add.

Mirrors the numpy backend exactly, including emission and accumulation
order, so outputs are bitwise identical.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

COORD_BITS = 21
COORD_LIMIT = 1 << 20

cdef long long _LIMIT = 1 << 20
cdef int _BITS = 21
cdef long long _MASK = (1 << 21) - 1


def pack(coords):
    c = np.ascontiguousarray(coords, dtype=np.int64)
    out = np.empty(c.shape[0], dtype=np.int64)
    cdef long long[:, ::1] cv = c.reshape(-1, 3)
    cdef long long[::1] ov = out
    cdef Py_ssize_t i, n = cv.shape[0]
    for i in range(n):
        ov[i] = (((cv[i, 0] + _LIMIT) << (2 * _BITS))
                 | ((cv[i, 1] + _LIMIT) << _BITS)
                 | (cv[i, 2] + _LIMIT))
    return out


def unpack(keys):
    k = np.ascontiguousarray(keys, dtype=np.int64)
    out = np.empty((k.shape[0], 3), dtype=np.int64)
    cdef long long[::1] kv = k
    cdef long long[:, ::1] ov = out
    cdef Py_ssize_t i, n = kv.shape[0]
    for i in range(n):
        ov[i, 0] = ((kv[i] >> (2 * _BITS)) & _MASK) - _LIMIT
        ov[i, 1] = ((kv[i] >> _BITS) & _MASK) - _LIMIT
        ov[i, 2] = (kv[i] & _MASK) - _LIMIT
    return out


cdef inline Py_ssize_t _slot(long long key, Py_ssize_t mask) noexcept nogil:
    cdef unsigned long long h = <unsigned long long> key
    h *= 0x9E3779B97F4A7C15ULL
    h ^= h >> 31
    return <Py_ssize_t> (h & <unsigned long long> mask)


cdef class HashIndex:
    """Open-addressing key -> row table (linear probing, keys >= 0)."""

    cdef long long[::1] _keys
    cdef long long[::1] _rows
    cdef Py_ssize_t _mask

    def __init__(self, keys):
        k = np.ascontiguousarray(keys, dtype=np.int64)
        cdef Py_ssize_t n = k.shape[0]
        cdef Py_ssize_t cap = 8
        while cap < 2 * n:
            cap <<= 1
        table_keys = np.full(cap, -1, dtype=np.int64)
        table_rows = np.empty(cap, dtype=np.int64)
        self._keys = table_keys
        self._rows = table_rows
        self._mask = cap - 1
        cdef long long[::1] kv = k
        cdef Py_ssize_t i, s
        for i in range(n):
            s = _slot(kv[i], self._mask)
            while self._keys[s] != -1 and self._keys[s] != kv[i]:
                s = (s + 1) & self._mask
            self._keys[s] = kv[i]
            self._rows[s] = i

    cdef long long _get(self, long long key) noexcept nogil:
        cdef Py_ssize_t s = _slot(key, self._mask)
        while True:
            if self._keys[s] == key:
                return self._rows[s]
            if self._keys[s] == -1:
                return -1
            s = (s + 1) & self._mask

    def lookup_keys(self, query_keys):
        q = np.ascontiguousarray(query_keys, dtype=np.int64)
        out = np.empty(q.shape[0], dtype=np.int64)
        cdef long long[::1] qv = q
        cdef long long[::1] ov = out
        cdef Py_ssize_t i, n = qv.shape[0]
        with nogil:
            for i in range(n):
                ov[i] = self._get(qv[i])
        return out


def make_index(keys):
    return HashIndex(keys)


def lookup(index, query_keys):
    return (<HashIndex> index).lookup_keys(query_keys)


def kernel_map(index, out_coords, offsets, stride):
    """Triples (input_row, output_row, offset_index), offset-major order."""
    cdef HashIndex idx = <HashIndex> index
    out = np.ascontiguousarray(out_coords, dtype=np.int64)
    offs = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef long long[:, ::1] ov = out.reshape(-1, 3)
    cdef long long[:, ::1] fv = offs.reshape(-1, 3)
    cdef Py_ssize_t n_out = ov.shape[0]
    cdef Py_ssize_t n_off = fv.shape[0]
    cdef long long st = stride

    in_rows = np.empty(n_out * n_off, dtype=np.int64)
    out_rows = np.empty(n_out * n_off, dtype=np.int64)
    off_idx = np.empty(n_out * n_off, dtype=np.int64)
    cdef long long[::1] irv = in_rows
    cdef long long[::1] orv = out_rows
    cdef long long[::1] kv = off_idx
    cdef Py_ssize_t k, o, count = 0
    cdef long long key, row
    with nogil:
        for k in range(n_off):
            for o in range(n_out):
                key = ((((ov[o, 0] * st + fv[k, 0]) + _LIMIT) << (2 * _BITS))
                       | (((ov[o, 1] * st + fv[k, 1]) + _LIMIT) << _BITS)
                       | ((ov[o, 2] * st + fv[k, 2]) + _LIMIT))
                row = idx._get(key)
                if row >= 0:
                    irv[count] = row
                    orv[count] = o
                    kv[count] = k
                    count += 1
    return in_rows[:count], out_rows[:count], off_idx[:count]


def scatter_add_rows(out, rows, vals):
    r = np.ascontiguousarray(rows, dtype=np.int64)
    cdef long long[::1] rv = r
    cdef Py_ssize_t n = rv.shape[0]
    if out.ndim == 2:
        v2 = np.ascontiguousarray(np.asarray(vals, dtype=np.float64).reshape(n, -1))
        _scatter2(out, rv, v2)
    else:
        v1 = np.ascontiguousarray(vals, dtype=np.float64).reshape(-1)
        _scatter1(out, rv, v1)


cdef void _scatter2(double[:, ::1] out, long long[::1] rows, double[:, ::1] vals) noexcept nogil:
    cdef Py_ssize_t i, j, n = rows.shape[0], c = vals.shape[1]
    for i in range(n):
        for j in range(c):
            out[rows[i], j] += vals[i, j]


cdef void _scatter1(double[::1] out, long long[::1] rows, double[::1] vals) noexcept nogil:
    cdef Py_ssize_t i, n = rows.shape[0]
    for i in range(n):
        out[rows[i]] += vals[i]
