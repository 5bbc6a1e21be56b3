"""Build the optional compiled LSTM kernel.

The package works without it (pure-numpy fallback), so a missing compiler or
Cython only produces a warning.
"""
import os
import sys

from setuptools import setup

ext_modules = []
if os.environ.get("EEND_NO_EXT", "") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError as exc:
        print(f"warning: building without compiled kernels ({exc})")
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "eend._lstm",
                    ["src/eend/_lstm.pyx"],
                    include_dirs=[np.get_include()],
                    libraries=["m"] + (["mvec"] if sys.platform.startswith("linux") else []),
                    extra_compile_args=["-O3", "-ffast-math", "-march=native"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
