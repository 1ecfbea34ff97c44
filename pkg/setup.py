from setuptools import Extension, setup
from Cython.Build import cythonize

extensions = [
    Extension(
        "rdplearn._kernels._uct_cy",
        sources=["src/rdplearn/_kernels/_uct_cy.pyx"],
        language="c++",
        extra_compile_args=["-O3"],
    )
]

setup(ext_modules=cythonize(extensions, language_level="3"))
