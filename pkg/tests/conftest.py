import os

# pin BLAS to one thread before numpy loads so numeric tests are
# reproducible bit-for-bit across runs
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
