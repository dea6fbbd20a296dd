"""Build script for the optional compiled q-evaluation kernel.

The package is fully functional without the extension: sncbf.kernels falls
back to a vectorized numpy implementation at import time.
"""
from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext = Extension(
        "sncbf.kernels._qcore",
        ["src/sncbf/kernels/_qcore.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        optional=True,
    )
    ext_modules = cythonize([ext], language_level=3)
except ImportError:
    pass

setup(ext_modules=ext_modules)
