import os

import numpy
from setuptools import Extension, setup

# The compiled kernels are an optional speedup; the package falls back to the
# vectorized numpy implementations when the extension is absent.
# Set VOXSEG_SKIP_EXT=1 to install without a C toolchain.
if os.environ.get("VOXSEG_SKIP_EXT") == "1":
    ext_modules = []
else:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "voxseg.kernels._cykernels",
                ["src/voxseg/kernels/_cykernels.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )

setup(ext_modules=ext_modules)
