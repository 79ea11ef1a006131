"""Pointer-softmax sequence models on a small numpy autodiff core."""

import os

# Cap BLAS thread pools before numpy gets imported anywhere in the package.
# PSX_THREADS (default 1) bounds intra-batch concurrency; has no effect if
# numpy was already imported by the embedding process.
_threads = os.environ.get("PSX_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
