import os

# Single-threaded BLAS before numpy loads: keeps runtimes comparable to the
# one-core budgets and makes reductions deterministic across runs.
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, os.environ.get("PSX_THREADS", "1"))
