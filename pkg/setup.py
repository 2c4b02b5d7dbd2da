# Builds the optional Cython kernel core. The package runs without it; the
# pure-Python kernels in lpq.kernels._pykernels are used as a fallback.
import os

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension
except ImportError:
    pass
else:
    if not os.environ.get("LPQ_NO_EXT"):
        ext_modules = cythonize(
            [
                Extension(
                    "lpq.kernels._ckernels",
                    ["src/lpq/kernels/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no FMA contraction, no reassociation: results must match
                    # the numpy fallback bit for bit
                    extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
