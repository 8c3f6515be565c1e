"""Build script for the optional compiled encoder core.

The extension is best-effort: if Cython or a C compiler is unavailable the
package installs anyway and falls back to the pure-numpy implementation
(see treebo.backend).
"""

import os

import numpy
from setuptools import setup
from setuptools.extension import Extension

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None and os.path.exists("src/treebo/_fastcore.pyx"):
    ext_modules = cythonize(
        [
            Extension(
                "treebo._fastcore",
                ["src/treebo/_fastcore.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
