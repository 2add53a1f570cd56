"""Build script for the optional compiled kernels.

The Cython extension is optional: if it fails to compile, the package still
installs and falls back to the pure-Python kernels at import time.
"""
import sys

import numpy as np
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # pragma: no cover - depends on toolchain
            print(f"warning: compiled kernels not built ({exc}); using pure-Python fallback",
                  file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # pragma: no cover
            print(f"warning: failed to build {ext.name} ({exc})", file=sys.stderr)


try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "gazehoi._kernels_cy",
                ["src/gazehoi/_kernels_cy.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3", "boundscheck": False,
                             "wraparound": False, "cdivision": True},
    )
except ImportError:  # pragma: no cover
    ext_modules = []

setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
