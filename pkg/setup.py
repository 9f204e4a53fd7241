import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# -ffp-contract=off keeps float32 multiply-add bit-identical to the numpy fallback.
compile_args = ["-O3", "-ffp-contract=off", "-fno-fast-math"]
link_args = []
if os.environ.get("INFERKIT_NO_OPENMP") != "1":
    compile_args.append("-fopenmp")
    link_args.append("-fopenmp")

extensions = [
    Extension(
        "inferkit.kernels._ckernels",
        ["src/inferkit/kernels/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=compile_args,
        extra_link_args=link_args,
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
