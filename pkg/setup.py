"""Build script: compiles the optional kernel extension when Cython and a C
compiler are available, falls back to the pure-Python kernels otherwise."""

import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


def _extensions():
    try:
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        return []
    ext = Extension(
        "journeykit.numerics._kernels",
        sources=["src/journeykit/numerics/_kernels.pyx"],
        # -ffp-contract=off keeps C arithmetic bit-identical to the pure
        # Python kernels (no fused multiply-add); do not add -ffast-math.
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


class OptionalBuildExt(build_ext):
    """Carry on with the pure backend if the extension fails to compile."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing or broken
            print(f"journeykit: skipping compiled kernels ({exc}); "
                  "pure-Python backend will be used", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"journeykit: failed to build {ext.name} ({exc}); "
                  "pure-Python backend will be used", file=sys.stderr)


setup(ext_modules=_extensions(), cmdclass={"build_ext": OptionalBuildExt})
