"""Build script for the compiled kernel extension.

The extension is optional: if Cython or a C compiler is unavailable (or
STRIDER_NO_EXT=1 is set), the package installs without it and the numpy
fallback backend is used at import time.
"""

import os

from setuptools import Extension, setup

extensions = []
if os.environ.get("STRIDER_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize

        extensions = cythonize(
            [
                Extension(
                    "strider.kernels._hot",
                    ["src/strider/kernels/_hot.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        extensions = []

setup(ext_modules=extensions)
