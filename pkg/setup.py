import numpy as np
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """Build the Cython kernels if a compiler is available; otherwise fall
    back to the pure-numpy kernels selected at import time."""

    def run(self):
        try:
            super().run()
        except Exception as exc:
            print(f"warning: compiled kernels skipped ({exc}); "
                  "pqpack will use the pure-Python fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: building {ext.name} failed ({exc}); "
                  "pqpack will use the pure-Python fallback")


extensions = [
    Extension(
        "pqpack._kernels._core",
        ["src/pqpack/_kernels/_core.pyx"],
        include_dirs=[np.get_include()],
        # -ffp-contract=off: kernel results are pinned to plain IEEE
        # mul/add sequences; FMA contraction would change the f64-input bits.
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
]

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        extensions, compiler_directives={"language_level": "3"}
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules, cmdclass={"build_ext": optional_build_ext})
