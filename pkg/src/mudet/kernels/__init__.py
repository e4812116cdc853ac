"""Hot numeric kernels with two interchangeable backends.

By default the numba JIT backend is used when numba imports cleanly.
Set ``MUDET_NUMBA=0`` to force the pure-numpy path (useful for debugging
and as the reference in ``benchmarks/bench_kernels.py``). ``MUDET_THREADS``
caps the numba thread pool.
"""

import os

from . import _numpy

_want_numba = os.environ.get("MUDET_NUMBA", "1") != "0"
_impl = _numpy
BACKEND = "numpy"

if _want_numba:
    try:
        from . import _numba as _impl_numba

        _impl = _impl_numba
        BACKEND = "numba"
        threads = os.environ.get("MUDET_THREADS")
        if threads:
            import numba

            numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))
    except ImportError:
        pass

im2col = _impl.im2col
col2im = _impl.col2im
rotrect_intersection = _impl.rotrect_intersection
nms_keep = _impl.nms_keep
rect_corners = _impl.rect_corners
paint_rect = _impl.paint_rect


def backend_name():
    return BACKEND
