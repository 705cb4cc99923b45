import os

import numpy as np
from setuptools import Extension, setup

# MUDICHO_NO_EXT=1 skips the compiled core; the package then runs on the numpy fallback.
ext_modules = []
if os.environ.get("MUDICHO_NO_EXT") != "1":
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "mudicho.kernels._core",
                ["src/mudicho/kernels/_core.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
