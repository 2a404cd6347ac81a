"""Sparse voxel surface completion and cross-sensor label transfer."""

__version__ = "0.1.0"

from .kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
