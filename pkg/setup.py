"""Build script: compiles the optional Cython kernel core.

The package works without the extension (a numpy fallback is selected at
import time); set MVEQ_NO_EXT=1 to skip compilation entirely.
"""

import os

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """Degrade to the pure-Python package when compilation fails."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            print(f"WARNING: compiled kernels skipped ({exc}); using numpy fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"WARNING: {ext.name} skipped ({exc}); using numpy fallback")


ext_modules = []
cmdclass = {}
if os.environ.get("MVEQ_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "mveq.kernels.fastcore",
                    ["src/mveq/kernels/fastcore.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
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
        cmdclass["build_ext"] = optional_build_ext
    except ImportError as exc:
        print(f"WARNING: Cython unavailable ({exc}); building pure-Python package")

setup(ext_modules=ext_modules, cmdclass=cmdclass)
