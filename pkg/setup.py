from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # the pure-python kernels are used instead
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "ambireg._kernels._drr_c",
                ["src/ambireg/_kernels/_drr_c.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
