"""Builds the optional Cython kernels; the package works without them."""
from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        ["src/egoplan/_ckernels.pyx"],
        compiler_directives={"language_level": "3"},
        quiet=True,
    )
    for ext in ext_modules:
        ext.optional = True
        ext.extra_compile_args = ["-O3"]
except Exception as exc:  # pragma: no cover - build-time only
    print(f"egoplan: building without compiled kernels ({exc})")

setup(ext_modules=ext_modules)
