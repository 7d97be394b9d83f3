"""Build script: compiles the optional Cython kernel.

The package works without the extension (a NumPy fallback is selected at
import time), so any failure here degrades to a pure-Python install.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/qres/_kernels/_qcore.pyx",
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
    include_dirs = [numpy.get_include()]
except Exception as exc:  # noqa: BLE001 - any build problem means pure-Python install
    print(f"qres: building without compiled kernel ({exc})")
    include_dirs = []

setup(ext_modules=ext_modules, include_dirs=include_dirs)
