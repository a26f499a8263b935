from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [Extension("hrt._ckernels", ["src/hrt/_ckernels.pyx"])],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    # Pure-python install still works; hrt.kernels falls back to numpy.
    extensions = []

setup(ext_modules=extensions)
