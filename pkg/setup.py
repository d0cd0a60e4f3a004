"""Build the optional compiled kernel extension.

If Cython or a C compiler is unavailable the package installs without it and
falls back to the numpy implementation at import time.
"""

import warnings

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            warnings.warn(f"compiled kernels not built, using numpy fallback: {exc}")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            warnings.warn(f"failed to build {ext.name}: {exc}")


try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    try:
        ext_modules = cythonize(
            [Extension("srko._ckernels", ["src/srko/_ckernels.pyx"], extra_compile_args=["-O3"])],
            compiler_directives={"language_level": "3"},
        )
    except Exception as exc:  # noqa: BLE001
        warnings.warn(f"cythonize failed, using numpy fallback: {exc}")
        ext_modules = []

setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
