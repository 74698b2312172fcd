"""Occupancy-field shape restoration: fracture synthesis, learning, extraction and evaluation."""

import os

# FRACTA_THREADS caps BLAS threads; it must be applied before numpy loads
_threads = os.environ.get("FRACTA_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
