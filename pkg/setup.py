"""Builds the compiled label-propagation kernel.

The package works without the extension (a pure-Python kernel is selected
at import time), so a missing compiler or Cython only costs speed.

    pip install -e . --no-build-isolation
"""

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "vidcorr.propagation._kernel",
                ["src/vidcorr/propagation/_kernel.pyx"],
                include_dirs=[np.get_include()],
                # -ffp-contract=off keeps the kernel bitwise-comparable to the
                # pure-Python path (no fused multiply-add in the dot products).
                extra_compile_args=["-O2", "-ffp-contract=off"],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )

setup(ext_modules=ext_modules)
