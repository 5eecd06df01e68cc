"""Build the optional compiled kernels.

The Cython module is optional: if it cannot be compiled the package still
installs and ``hlora_asr.kernels`` falls back to the pure-Python routines.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("HLORA_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "hlora_asr._ckernels",
                    ["src/hlora_asr/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
