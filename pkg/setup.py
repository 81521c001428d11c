"""Build script: compiles the optional fast matching kernel.

The package is pure Python plus one optional Cython extension
(kvlab._matchcore).  If Cython or a C compiler is unavailable the build
degrades gracefully and the package falls back to the pure-Python kernel
at import time.
"""

from setuptools import Extension, setup

extensions = []
try:
    import numpy as np
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "kvlab._matchcore",
                ["src/kvlab/_matchcore.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    pass

setup(ext_modules=extensions)
