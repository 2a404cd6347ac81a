"""Pure-numpy implementation of the hot kernels.

Keys are 63-bit integers: three 21-bit offset-binary fields, collision-free
for coordinates with |v| < 2**20. Lookup uses binary search on a sorted key
array; accumulation order matches the compiled backend exactly so results
are bitwise identical across backends.
"""

import numpy as np

COORD_BITS = 21
COORD_LIMIT = 1 << 20  # valid coords satisfy |v| < COORD_LIMIT
_FIELD_MASK = (1 << COORD_BITS) - 1


def pack(coords):
    """Pack integer (n, 3) coordinates into unique 63-bit keys."""
    c = np.asarray(coords, dtype=np.int64)
    x = c[:, 0] + COORD_LIMIT
    y = c[:, 1] + COORD_LIMIT
    z = c[:, 2] + COORD_LIMIT
    return (x << (2 * COORD_BITS)) | (y << COORD_BITS) | z


def unpack(keys):
    """Invert :func:`pack`."""
    k = np.asarray(keys, dtype=np.int64)
    out = np.empty((k.shape[0], 3), dtype=np.int64)
    out[:, 0] = ((k >> (2 * COORD_BITS)) & _FIELD_MASK) - COORD_LIMIT
    out[:, 1] = ((k >> COORD_BITS) & _FIELD_MASK) - COORD_LIMIT
    out[:, 2] = (k & _FIELD_MASK) - COORD_LIMIT
    return out


def make_index(keys):
    """Build a lookup structure mapping key -> row for distinct keys."""
    keys = np.asarray(keys, dtype=np.int64)
    order = np.argsort(keys, kind="stable")
    return keys[order], order.astype(np.int64)


def lookup(index, query_keys):
    """Row indices for query keys; -1 where absent."""
    sorted_keys, order = index
    q = np.asarray(query_keys, dtype=np.int64)
    if len(sorted_keys) == 0:
        return np.full(q.shape, -1, dtype=np.int64)
    pos = np.minimum(np.searchsorted(sorted_keys, q), len(sorted_keys) - 1)
    return np.where(sorted_keys[pos] == q, order[pos], -1).astype(np.int64)


def kernel_map(index, out_coords, offsets, stride):
    """Triples (input_row, output_row, offset_index) for a sparse convolution.

    An entry exists iff input coord == stride * out_coord + offset. Entries
    are emitted offset-major, output-row ascending within each offset, which
    fixes the accumulation order downstream.
    """
    out = np.asarray(out_coords, dtype=np.int64)
    offs = np.asarray(offsets, dtype=np.int64)
    n_out = out.shape[0]
    in_rows, out_rows, off_idx = [], [], []
    base = out * stride
    for k in range(offs.shape[0]):
        rows = lookup(index, pack(base + offs[k]))
        hit = np.flatnonzero(rows >= 0)
        in_rows.append(rows[hit])
        out_rows.append(hit)
        off_idx.append(np.full(hit.shape, k, dtype=np.int64))
    if n_out == 0 or not in_rows:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy(), empty.copy()
    return (
        np.concatenate(in_rows),
        np.concatenate(out_rows),
        np.concatenate(off_idx),
    )


def scatter_add_rows(out, rows, vals):
    """out[rows[i]] += vals[i], accumulated in index order (deterministic)."""
    np.add.at(out, rows, vals)
