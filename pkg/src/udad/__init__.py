"""Unsupervised dMRI artifact detection toolkit.

Synthetic diffusion phantoms, tensor fitting, a small conv-net stack with
cycle-consistency training, and confidence-score screening of corrupted
acquisitions.
"""

import os

# Pin BLAS thread pools before numpy is first imported anywhere in the
# package, otherwise reductions can reassociate across runs and break
# bit-reproducibility of trained weights.
for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
):
    os.environ.setdefault(_var, "1")
del _var

__version__ = "0.1.0"
