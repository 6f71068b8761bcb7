"""Build script.

The compiled kernel extension is optional: if Cython or a C compiler is
unavailable the package installs anyway and falls back to the pure NumPy
kernels at import time. Set CASTR_NO_EXT=1 to skip the extension build
entirely.
"""

import os
import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """build_ext that degrades to a warning instead of failing the install."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            print(f"warning: skipping compiled kernels ({exc})", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(
                f"warning: could not build {ext.name} ({exc}); "
                "the pure NumPy backend will be used",
                file=sys.stderr,
            )


ext_modules = []
if not os.environ.get("CASTR_NO_EXT"):
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "castr.kernels._core",
                    ["src/castr/kernels/_core.pyx"],
                    # fast-math lets gcc use the vectorized libm (libmvec)
                    # for exp/erf loops; kernels avoid NaN/Inf-dependent
                    # control flow so the relaxed semantics are safe here
                    extra_compile_args=["-O3", "-ffast-math", "-march=native"],
                    extra_link_args=["-lmvec", "-lm"],
                )
            ],
            language_level=3,
        )
    except ImportError:
        print("warning: Cython not available; building without compiled kernels",
              file=sys.stderr)

setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
