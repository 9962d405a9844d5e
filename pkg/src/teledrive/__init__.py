"""Closed-loop simulator for a teleoperated vehicle with an MPC active safety system."""

import os as _os

# The controller solves many small dense problems; threaded BLAS only adds
# synchronization overhead at these sizes and hurts determinism of timing.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")
try:
    import threadpoolctl as _threadpoolctl

    _BLAS_LIMIT = _threadpoolctl.threadpool_limits(limits=1, user_api="blas")
except ImportError:  # pragma: no cover
    _BLAS_LIMIT = None

__version__ = "0.1.0"
