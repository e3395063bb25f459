"""Build script for the optional compiled convolution kernels.

The package works without the extension (a numpy fallback is selected at
import time); building it just makes training faster on one core.
"""
import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("PROTOSHIFT_SKIP_EXT", "") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "protoshift._kernels.conv_ext",
                    sources=["src/protoshift/_kernels/conv_ext.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3", "-march=native", "-funroll-loops"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
