"""Recover iterated-function-system fractal codes from images."""

import os

import numba

if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "omp"

__version__ = "0.1.0"
