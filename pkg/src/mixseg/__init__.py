"""Semi-supervised segmentation by mixing labeled and unlabeled inputs.

Importing the package pins BLAS thread counts (GMX_THREADS, default 1)
before numpy loads; reductions change summation order per thread count,
and byte-identical reruns are part of the contract.
"""

import os

_n = os.environ.get("GMX_THREADS", "1")
for _var in (
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "OMP_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
):
    os.environ.setdefault(_var, _n)

__version__ = "0.1.0"
