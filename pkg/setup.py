from Cython.Build import cythonize
from setuptools import Extension, setup

ext = Extension(
    "talkstyle.kernels._ckernels",
    ["src/talkstyle/kernels/_ckernels.pyx"],
    extra_compile_args=["-O3"],
)

setup(ext_modules=cythonize([ext], compiler_directives={"language_level": "3"}))
