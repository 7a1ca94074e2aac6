import os

from setuptools import Extension, setup


def _compile_args():
    # -march=native matters: the warp kernel loses ~2x without AVX codegen,
    # and the wide-vector preference another ~2x where AVX-512 exists.
    # Set SWEEPSYNTH_PORTABLE=1 to build a generic binary instead.
    args = ["-O3", "-std=c99", "-ffast-math"]
    if os.environ.get("SWEEPSYNTH_PORTABLE") != "1":
        args += ["-march=native", "-mprefer-vector-width=512"]
    return args


setup(
    ext_modules=[
        Extension(
            "sweepsynth._kernels",
            sources=["src/sweepsynth/csrc/kernels.c"],
            extra_compile_args=_compile_args(),
            optional=True,
        )
    ]
)
