"""Build the optional compiled flux kernel.

The package works without it (a numpy fallback is selected at import time),
so any build failure here degrades to a pure-Python install.
"""
from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize

    # -ffp-contract=off keeps the kernel bit-identical to the numpy path
    # (no FMA contraction), which the parity tests assert.
    extensions = cythonize(
        [
            Extension(
                "amrtok._native._euler",
                ["src/amrtok/_native/_euler.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # pragma: no cover - build-environment dependent
    print(f"amrtok: skipping compiled kernel ({exc!r}); numpy fallback will be used")
    extensions = []

setup(ext_modules=extensions)
