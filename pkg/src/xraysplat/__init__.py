"""Dynamic additive Gaussian splatting for sparse, low-resolution X-ray
projection sequences."""

import os
import sys

# The workqueue layer needs no TBB or OpenMP runtime.  Allowing more threads
# than cores lets `set_threads` honour an explicit request on small machines,
# but numba rejects a changed pool size once it has been imported, so that
# part only applies when we get there first.
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
if "numba" not in sys.modules:
    os.environ.setdefault("NUMBA_NUM_THREADS", str(max(os.cpu_count() or 1, 8)))

import numba  # noqa: E402

numba.set_num_threads(min(os.cpu_count() or 1, numba.config.NUMBA_NUM_THREADS))


def set_threads(n: int) -> None:
    """Worker threads used by the rasterizer and field kernels."""
    numba.set_num_threads(int(n))


def get_threads() -> int:
    return numba.get_num_threads()


__version__ = "0.1.0"
