"""Multistep consistency models on Gaussian-mixture toy data."""

import os as _os

# MSCM_THREADS caps BLAS threads; it must be applied before numpy is imported
if _os.environ.get("MSCM_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["MSCM_THREADS"])

__version__ = "0.1.0"
