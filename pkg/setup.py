from setuptools import Extension, setup

import numpy as np
from Cython.Build import cythonize

ext_modules = [
    Extension(
        "surfeltrace._core",
        sources=["src/surfeltrace/_core.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-fopenmp"],
        extra_link_args=["-fopenmp"],
    )
]

setup(ext_modules=cythonize(ext_modules, language_level=3))
