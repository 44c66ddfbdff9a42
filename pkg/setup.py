"""Build script for the optional Cython kernel extension.

The extension is marked optional: if no C compiler is available the install
still succeeds and the package falls back to the NumPy kernels at import.
"""

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = [
    Extension(
        "fanin._kernels",
        ["src/fanin/_kernels.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        # -ffp-contract=off keeps float32 accumulation bit-identical to the
        # NumPy fallback (no fused multiply-add).
        extra_compile_args=["-O3", "-ffp-contract=off"],
        optional=True,
    )
]

setup(
    ext_modules=cythonize(ext_modules, language_level=3) if cythonize else [],
)
