# Build the optional compiled kernels: pip install -e . --no-build-isolation
# Without a working compiler the package still installs and runs on the
# pure-Python kernels.
import os

from setuptools import setup

ext_modules = []
if os.environ.get("BTADAPT_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "btadapt._kernels",
                    ["src/btadapt/_kernels.pyx"],
                    # no FMA contraction: results must match the Python kernels bit for bit
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )

setup(ext_modules=ext_modules)
