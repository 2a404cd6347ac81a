"""Hot kernels with a compiled core and a pure-numpy fallback.

The compiled extension (``voxcomplete.kernels._native``, Cython) implements
coordinate-key packing, hash lookup, kernel-map construction and row
scatter-add. When it is missing the numpy implementation is used; both
produce bitwise-identical results (same accumulation order). Selection
happens once at import; set ``VOXCOMPLETE_KERNELS=python`` or ``=native``
to force a backend.
"""

import os

from . import _numpy

_requested = os.environ.get("VOXCOMPLETE_KERNELS", "auto")

if _requested == "python":
    _impl = _numpy
    BACKEND = "python"
elif _requested == "native":
    from . import _native as _impl

    BACKEND = "native"
else:
    try:
        from . import _native as _impl

        BACKEND = "native"
    except ImportError:
        _impl = _numpy
        BACKEND = "python"

pack = _impl.pack
unpack = _impl.unpack
make_index = _impl.make_index
lookup = _impl.lookup
kernel_map = _impl.kernel_map
scatter_add_rows = _impl.scatter_add_rows

COORD_BITS = _numpy.COORD_BITS
COORD_LIMIT = _numpy.COORD_LIMIT


def get_backend(name):
    """Return a specific backend module ('python' or 'native'), for benchmarks."""
    if name == "python":
        return _numpy
    if name == "native":
        from . import _native

        return _native
    raise ValueError(f"unknown kernel backend {name!r}")
