import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # the numpy kernels take over at import time
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("CLIMGAN_PURE_PYTHON"):
    ext_modules = cythonize(
        [
            Extension(
                "climgan._kernels",
                ["src/climgan/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
        quiet=True,
    )

setup(ext_modules=ext_modules)
