import os

from setuptools import Extension, setup


def _has_avx2() -> bool:
    try:
        with open("/proc/cpuinfo") as f:
            return "avx2" in f.read()
    except OSError:
        return False


# libmvec gives SIMD expf/exp under -ffast-math; only when the host has AVX2
if _has_avx2():
    compile_args = ["-O3", "-ffast-math", "-mavx2", "-mfma"]
    libraries = ["mvec", "m"]
else:
    compile_args = ["-O3"]
    libraries = ["m"]

ext_modules = []
if os.environ.get("FXDL_NO_EXT", "") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "fxdl._kernels",
                    ["src/fxdl/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=compile_args,
                    libraries=libraries,
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
