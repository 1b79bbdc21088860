"""Shared test configuration.

Pins BLAS to one thread so the timing-sensitive acceptance criteria measure
single-core behavior (matching how the suite is documented to run) and so
tiny-matrix multiplies are not slowed by thread oversubscription. The
environment variables only help if numpy is not yet loaded; threadpoolctl
works either way.
"""

import os
import sys

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

try:
    import threadpoolctl

    threadpoolctl.threadpool_limits(limits=1)
except ImportError:  # fall back to the env vars above
    pass
