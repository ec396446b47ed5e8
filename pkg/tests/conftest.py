# Pin BLAS to one thread before numpy loads: the matrices here are small, so
# threading only adds nondeterministic scheduling overhead, and single-thread
# keeps worker processes from oversubscribing cores during acceptance runs.
import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
