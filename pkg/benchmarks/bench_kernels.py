"""Benchmark: compiled kernel core vs pure-numpy fallback.

Times the hot paths (key packing, index build, lookup, kernel-map
construction, scatter-add) and one sparse-conv forward+backward through
each backend. Run:

    python3 benchmarks/bench_kernels.py [n_voxels]
"""

import sys
import time

import numpy as np

from voxcomplete import autodiff as ad
from voxcomplete import kernels
from voxcomplete.autodiff import Param, Tape, Tensor
from voxcomplete.grid import SparseGrid, build_kernel_map, kernel_offsets, unique_coords


def surface_like_coords(rng, n):
    """Coordinates concentrated near a 2D sheet, like voxelized scenes."""
    xy = rng.integers(0, int(np.sqrt(n) * 2), size=(n, 2))
    z = (3 * np.sin(xy[:, 0] / 7.0) + rng.integers(0, 2, size=n)).astype(np.int64)
    return unique_coords(np.column_stack([xy, z]))


def timeit(fn, repeat=5):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_backend(name, mod, coords, out_coords, channels=32):
    offs = kernel_offsets(3)
    res = {}
    res["pack"] = timeit(lambda: mod.pack(coords))
    keys = mod.pack(coords)
    res["index"] = timeit(lambda: mod.make_index(keys))
    index = mod.make_index(keys)
    queries = mod.pack(out_coords)
    res["lookup"] = timeit(lambda: mod.lookup(index, queries))
    res["kernel_map"] = timeit(lambda: mod.kernel_map(index, out_coords, offs, 1))

    rng = np.random.default_rng(0)
    rows = rng.integers(0, len(coords), size=len(coords) * 8)
    vals = rng.normal(size=(len(rows), channels))
    buf = np.zeros((len(coords), channels))
    res["scatter_add"] = timeit(lambda: mod.scatter_add_rows(buf, rows, vals))
    return res


def bench_conv(mod_name, coords, channels=32):
    import os

    # force the already-imported kernels module to the chosen backend
    backend = kernels.get_backend(mod_name)
    for fn in ("pack", "make_index", "lookup", "kernel_map", "scatter_add_rows"):
        setattr(kernels, fn, getattr(backend, fn))
    grid = SparseGrid(0, 0.2, (0, 0, 0), coords, np.ones((len(coords), 1)))
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(len(coords), channels))
    w = Param("w", rng.normal(size=(27, channels, channels)) * 0.1)
    b = Param("b", np.zeros(channels))

    def step():
        km = build_kernel_map(grid, grid.coords, 3, 1)
        tape = Tape()
        x = Tensor(x0)
        out = ad.sparse_conv(tape, x, km, w, b)
        loss = Tensor((out.value**2).sum())
        tape.record(lambda: out.accumulate(2 * loss.grad * out.value))
        tape.backward(loss)
        w.grad = None
        b.grad = None

    return timeit(step, repeat=3)


def main():
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 200_000
    rng = np.random.default_rng(7)
    coords = surface_like_coords(rng, n)
    out_coords = coords[:: 2]
    print(f"voxels: {len(coords)}, outputs: {len(out_coords)}")

    backends = ["python"]
    try:
        kernels.get_backend("native")
        backends.append("native")
    except ImportError:
        print("native backend not built; benchmarking python only")

    rows = {}
    for name in backends:
        rows[name] = bench_backend(name, kernels.get_backend(name), coords, out_coords)
        rows[name]["conv_fwd_bwd"] = bench_conv(name, coords)

    ops = list(next(iter(rows.values())))
    header = f"{'op':>14} " + " ".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f" {'speedup':>9}"
    print(header)
    for op in ops:
        line = f"{op:>14} " + " ".join(f"{rows[b][op] * 1e3:>10.2f}ms" for b in backends)
        if len(backends) == 2:
            line += f" {rows['python'][op] / rows['native'][op]:>8.1f}x"
        print(line)


if __name__ == "__main__":
    main()
