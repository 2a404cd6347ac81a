"""Sparse voxel grids: voxelization, multi-resolution coordinates, kernel maps.

A grid is an ordered set of integer voxel coordinates at some resolution
level (cell edge = base_size * 2**level) plus an optional feature matrix
with one row per voxel. Coordinates are hashed through a collision-free
63-bit packed key (21 bits per axis, offset binary), so set operations and
neighbor lookups never face probing ambiguity.

All operations here are deterministic: output order is a pure function of
input order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import CoordinateRangeError, FormatError, StructureError

GRID_MAGIC = b"SVGR"
GRID_VERSION = 1


def _as_coords(coords) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64)
    if c.ndim != 2 or c.shape[1] != 3:
        c = c.reshape(-1, 3)
    return c


def check_coord_range(coords: np.ndarray, context: str = "coordinate"):
    """Reject coordinates outside the 21-bit packed-key budget."""
    if coords.size == 0:
        return
    bad = np.abs(coords) >= kernels.COORD_LIMIT
    if bad.any():
        i = int(np.flatnonzero(bad.any(axis=1))[0])
        raise CoordinateRangeError(
            f"{context} {tuple(int(v) for v in coords[i])} exceeds the "
            f"+/-{kernels.COORD_LIMIT - 1} voxel index range"
        )


@dataclass
class SparseGrid:
    """Level-tagged sparse voxel set with per-voxel features.

    ``coords`` keeps insertion order; ``index`` maps packed keys back to
    rows. ``voxel_size`` is the edge length in meters at this level.
    """

    level: int
    voxel_size: float
    origin: np.ndarray
    coords: np.ndarray
    features: np.ndarray
    _index: object = field(default=None, repr=False, compare=False)
    _keys: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.coords = _as_coords(self.coords)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        if self.features.shape[0] != self.coords.shape[0]:
            raise StructureError(
                f"feature rows ({self.features.shape[0]}) != voxel count "
                f"({self.coords.shape[0]})"
            )

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def keys(self) -> np.ndarray:
        if self._keys is None:
            self._keys = kernels.pack(self.coords)
        return self._keys

    @property
    def index(self):
        if self._index is None:
            self._index = kernels.make_index(self.keys)
        return self._index

    def rows_of(self, coords) -> np.ndarray:
        """Row index per query coordinate, -1 where absent."""
        return kernels.lookup(self.index, kernels.pack(_as_coords(coords)))

    def contains(self, coords) -> np.ndarray:
        return self.rows_of(coords) >= 0


class CoordIndex:
    """Bare coordinate set with the same lazy key/index machinery as a grid.

    Network code threads these through levels where no feature matrix is
    attached to the coordinates themselves.
    """

    __slots__ = ("coords", "_keys", "_index")

    def __init__(self, coords):
        self.coords = _as_coords(coords)
        self._keys = None
        self._index = None

    def __len__(self):
        return self.coords.shape[0]

    @property
    def keys(self):
        if self._keys is None:
            self._keys = kernels.pack(self.coords)
        return self._keys

    @property
    def index(self):
        if self._index is None:
            self._index = kernels.make_index(self.keys)
        return self._index

    def rows_of(self, coords):
        return kernels.lookup(self.index, kernels.pack(_as_coords(coords)))


def voxelize(points, voxel_size: float, origin=(0.0, 0.0, 0.0)):
    """Quantize points into a unit-feature grid at level 0.

    Cells are half-open: a point on a cell boundary belongs to the higher
    cell. Returns the grid (voxels in order of first point occurrence) and
    the row index of every input point's voxel.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    coords = np.floor((pts - origin) / voxel_size).astype(np.int64)
    if coords.size:
        bad = np.abs(coords) >= kernels.COORD_LIMIT
        if bad.any():
            i = int(np.flatnonzero(bad.any(axis=1))[0])
            raise CoordinateRangeError(
                f"point {tuple(float(v) for v in pts[i])} quantizes to "
                f"{tuple(int(v) for v in coords[i])}, outside the "
                f"+/-{kernels.COORD_LIMIT - 1} index range"
            )
    uniq_coords, point_to_voxel = unique_coords(coords, return_inverse=True)
    grid = SparseGrid(
        level=0,
        voxel_size=float(voxel_size),
        origin=origin,
        coords=uniq_coords,
        features=np.ones((uniq_coords.shape[0], 1), dtype=np.float64),
    )
    return grid, point_to_voxel


def unique_coords(coords, return_inverse: bool = False):
    """Deduplicate coordinates preserving first-occurrence order."""
    c = _as_coords(coords)
    if c.shape[0] == 0:
        if return_inverse:
            return c, np.empty(0, dtype=np.int64)
        return c
    keys = kernels.pack(c)
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    uniq = c[first[order]]
    if not return_inverse:
        return uniq
    # remap sorted-unique positions to insertion-order rows
    rank = np.empty_like(order)
    rank[order] = np.arange(order.shape[0])
    return uniq, rank[inverse].astype(np.int64)


def coarsen_coords(coords) -> np.ndarray:
    """Parent coordinates one level up (floor division by 2, deduplicated)."""
    # arithmetic shift floors toward -inf, matching floor division for negatives
    return unique_coords(_as_coords(coords) >> 1)


_CHILD_OFFSETS = np.array(
    [[dx, dy, dz] for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)],
    dtype=np.int64,
)


def dense_upsample_coords(coords) -> np.ndarray:
    """All 8 children of every coordinate, parent-major order."""
    c = _as_coords(coords)
    children = (2 * c)[:, None, :] + _CHILD_OFFSETS[None, :, :]
    return children.reshape(-1, 3)


def kernel_offsets(kernel_size: int) -> np.ndarray:
    """Centered offset table with the zero offset first.

    Offset index 0 is always (0,0,0) so identity pairings sit in the first
    group of a kernel map.
    """
    if kernel_size % 2 != 1 or kernel_size < 1:
        raise ValueError("kernel_size must be odd and positive")
    r = kernel_size // 2
    span = np.arange(-r, r + 1, dtype=np.int64)
    offs = np.stack(np.meshgrid(span, span, span, indexing="ij"), axis=-1).reshape(-1, 3)
    center = np.flatnonzero((offs == 0).all(axis=1))[0]
    order = np.concatenate(([center], np.delete(np.arange(offs.shape[0]), center)))
    return offs[order]


@dataclass
class KernelMap:
    """Precomputed (input_row, output_row, offset_index) triples.

    Entries are offset-major, output-row ascending, which (a) makes group
    slices contiguous and (b) pins the accumulation order for bitwise
    determinism. Within one offset, input and output rows are both unique.
    """

    kernel_size: int
    stride: int
    in_rows: np.ndarray
    out_rows: np.ndarray
    offset_index: np.ndarray
    n_offsets: int
    n_out: int
    group_bounds: np.ndarray  # n_offsets + 1 slice boundaries

    def __len__(self) -> int:
        return self.in_rows.shape[0]

    def group(self, k: int):
        a, b = self.group_bounds[k], self.group_bounds[k + 1]
        return self.in_rows[a:b], self.out_rows[a:b]


def build_kernel_map(in_grid: SparseGrid, out_coords, kernel_size: int, stride: int = 1) -> KernelMap:
    """Kernel map pairing active input voxels with output sites.

    Entry (i, o, k) exists iff in.coords[i] == stride * out[o] + offset_k,
    with the centered offset table of :func:`kernel_offsets` for both
    strides (stride 2 anchors the kernel on the even input site).
    """
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    offs = kernel_offsets(kernel_size)
    out = _as_coords(out_coords)
    in_rows, out_rows, off_idx = kernels.kernel_map(in_grid.index, out, offs, stride)
    bounds = np.searchsorted(off_idx, np.arange(offs.shape[0] + 1))
    return KernelMap(
        kernel_size=kernel_size,
        stride=stride,
        in_rows=in_rows,
        out_rows=out_rows,
        offset_index=off_idx,
        n_offsets=offs.shape[0],
        n_out=out.shape[0],
        group_bounds=bounds,
    )


def set_intersect(a, b) -> np.ndarray:
    """Coordinates present in both sets, in the order of ``a``."""
    a = unique_coords(a)
    if a.shape[0] == 0 or _as_coords(b).shape[0] == 0:
        return np.empty((0, 3), dtype=np.int64)
    bk = np.sort(kernels.pack(unique_coords(b)))
    ak = kernels.pack(a)
    pos = np.minimum(np.searchsorted(bk, ak), len(bk) - 1)
    return a[bk[pos] == ak]


def set_diff(a, b) -> np.ndarray:
    """Coordinates of ``a`` absent from ``b``, in the order of ``a``."""
    a = unique_coords(a)
    if a.shape[0] == 0:
        return a
    if _as_coords(b).shape[0] == 0:
        return a
    bk = np.sort(kernels.pack(unique_coords(b)))
    ak = kernels.pack(a)
    pos = np.minimum(np.searchsorted(bk, ak), len(bk) - 1)
    return a[bk[pos] != ak]


def membership_mask(coords, reference) -> np.ndarray:
    """Boolean per coordinate: is it in ``reference``?"""
    c = _as_coords(coords)
    ref = _as_coords(reference)
    if c.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    if ref.shape[0] == 0:
        return np.zeros(c.shape[0], dtype=bool)
    rk = np.sort(kernels.pack(ref))
    ck = kernels.pack(c)
    pos = np.minimum(np.searchsorted(rk, ck), len(rk) - 1)
    return rk[pos] == ck


def parent_rows(parent_set, target_coords) -> np.ndarray:
    """Row in the parent set of each target coordinate's parent (floor/2).

    Raises if a target has no parent voxel, naming the offending coord.
    """
    t = _as_coords(target_coords)
    rows = parent_set.rows_of(t >> 1)
    missing = rows < 0
    if missing.any():
        c = t[int(np.flatnonzero(missing)[0])]
        raise StructureError(
            f"target voxel {tuple(int(v) for v in c)} has no parent in the coarser level"
        )
    return rows


def voxel_centers(grid: SparseGrid) -> np.ndarray:
    """Cell centers in meters: origin + (c + 0.5) * voxel_size."""
    return grid.origin + (grid.coords.astype(np.float64) + 0.5) * grid.voxel_size


def coords_to_centers(coords, voxel_size: float, origin) -> np.ndarray:
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    return origin + (_as_coords(coords).astype(np.float64) + 0.5) * voxel_size


def save_grid(path, grid: SparseGrid):
    """Serialize a grid (little-endian, f32 features)."""
    check_coord_range(grid.coords)
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(np.array([GRID_VERSION], dtype="<u2").tobytes())
        f.write(np.array([grid.level], dtype="u1").tobytes())
        f.write(np.array([grid.voxel_size], dtype="<f8").tobytes())
        f.write(grid.origin.astype("<f8").tobytes())
        f.write(np.array([len(grid)], dtype="<u8").tobytes())
        f.write(np.array([grid.features.shape[1]], dtype="<u4").tobytes())
        f.write(grid.coords.astype("<i4").tobytes())
        f.write(grid.features.astype("<f4").tobytes())


def load_grid(path) -> SparseGrid:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != GRID_MAGIC:
        raise FormatError(f"{path}: not a grid file (bad magic)")
    version = int(np.frombuffer(raw, "<u2", 1, 4)[0])
    if version != GRID_VERSION:
        raise FormatError(f"{path}: unsupported grid version {version}")
    level = int(raw[6])
    voxel_size = float(np.frombuffer(raw, "<f8", 1, 7)[0])
    origin = np.frombuffer(raw, "<f8", 3, 15).astype(np.float64)
    count = int(np.frombuffer(raw, "<u8", 1, 39)[0])
    channels = int(np.frombuffer(raw, "<u4", 1, 47)[0])
    off = 51
    need = off + count * 12 + count * channels * 4
    if len(raw) != need:
        raise FormatError(f"{path}: truncated grid file ({len(raw)} != {need} bytes)")
    coords = np.frombuffer(raw, "<i4", count * 3, off).reshape(count, 3).astype(np.int64)
    feats = (
        np.frombuffer(raw, "<f4", count * channels, off + count * 12)
        .reshape(count, channels)
        .astype(np.float64)
    )
    return SparseGrid(level=level, voxel_size=voxel_size, origin=origin, coords=coords, features=feats)
