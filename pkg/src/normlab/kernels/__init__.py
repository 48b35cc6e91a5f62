"""Convolution kernels with a numba hot path and a pure-numpy fallback.

The backend is chosen once at import time from the ``NORMLAB_BACKEND``
environment variable: ``numba`` (default when numba imports cleanly),
``numpy``, or ``auto``. Both backends implement the same three entry
points on contiguous float64 arrays:

    conv2d_forward(x, w, b, ph, pw)          -> y
    conv2d_grad_input(gy, w, h, w_in, ph, pw) -> dx
    conv2d_grad_weight(gy, x, kh, kw, ph, pw) -> dw

Outputs are deterministic for a fixed backend; the two backends agree to
float64 rounding but not bit-for-bit (different summation orders).
``benchmarks/bench_kernels.py`` compares their throughput.
"""

import os

_requested = os.environ.get("NORMLAB_BACKEND", "auto").strip().lower()

if _requested in ("", "auto"):
    try:
        from . import numba_backend as _impl
        BACKEND = "numba"
    except ImportError:
        from . import numpy_backend as _impl
        BACKEND = "numpy"
elif _requested == "numba":
    from . import numba_backend as _impl
    BACKEND = "numba"
elif _requested == "numpy":
    from . import numpy_backend as _impl
    BACKEND = "numpy"
else:
    raise ValueError(f"NORMLAB_BACKEND={_requested!r}: expected 'numba', 'numpy' or 'auto'")

conv2d_forward = _impl.conv2d_forward
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_weight = _impl.conv2d_grad_weight
