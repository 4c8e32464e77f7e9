import os
import warnings

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

try:
    from Cython.Build import cythonize
except ImportError:
    warnings.warn("Cython not found; rcdet will use the pure-Python box kernels.")
    cythonize = None


class OptionalBuildExt(build_ext):
    """Never fail the install because the compiled core did not build."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            warnings.warn(f"compiled box kernels not built ({exc}); using fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            warnings.warn(f"failed to build {ext.name} ({exc}); using fallback")


ext_modules = []
if cythonize is not None and not os.environ.get("RCDET_NO_EXT"):
    import numpy as np

    ext_modules = cythonize(
        [
            Extension(
                "rcdet._boxkernels",
                ["src/rcdet/_boxkernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )

setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
