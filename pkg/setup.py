"""Builds the optional compiled kernel extension.

The package works without it (a numpy fallback is selected at import); the
extension accelerates coordinate hashing, kernel-map construction and the
gather/scatter inner loops.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "voxcomplete.kernels._native",
                ["src/voxcomplete/kernels/_native.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
