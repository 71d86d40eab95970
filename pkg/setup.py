"""Build the optional compiled tape. Without Cython or a compiler the
package still installs and runs on the pure-Python backend."""

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize
    from setuptools import Extension
except ImportError:
    pass
else:
    ext_modules = cythonize(
        [Extension("rationalpg.hograd._ctape",
                   ["src/rationalpg/hograd/_ctape.pyx"],
                   extra_compile_args=["-O3"],
                   optional=True)],
        compiler_directives={"language_level": "3"},
        quiet=True,
    )

setup(ext_modules=ext_modules)
