from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [Extension("mpquant._kernels", ["src/mpquant/_kernels.pyx"])],
        language_level=3,
    )
except ImportError:
    # Pure-Python install still works; mpquant.kernels falls back to numpy.
    ext_modules = []

setup(ext_modules=ext_modules)
