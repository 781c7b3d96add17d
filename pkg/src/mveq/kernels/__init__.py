"""Kernel backend selection.

The compiled core (mveq.kernels.fastcore, Cython) is preferred; the numpy
fallback has identical contracts. Override with MVEQ_KERNELS=c|python.
benchmarks/bench_kernels.py compares the two.
"""

from __future__ import annotations

import os

_requested = os.environ.get("MVEQ_KERNELS", "auto").lower()

if _requested in ("auto", "c"):
    try:
        from . import fastcore as _impl

        BACKEND = "c"
    except ImportError:
        if _requested == "c":
            raise
        from . import numpy_backend as _impl

        BACKEND = "python"
elif _requested in ("python", "py"):
    from . import numpy_backend as _impl

    BACKEND = "python"
else:
    raise ValueError(f"MVEQ_KERNELS must be auto, c or python, got {_requested!r}")

nn_argmax = _impl.nn_argmax
bilinear_gather = _impl.bilinear_gather
bilinear_scatter = _impl.bilinear_scatter
conv3x3_forward = _impl.conv3x3_forward
conv3x3_backward = _impl.conv3x3_backward


def available_backends() -> dict[str, object]:
    """Importable backend modules keyed by name (for tests/benchmarks)."""
    from . import numpy_backend

    found: dict[str, object] = {"python": numpy_backend}
    try:
        from . import fastcore

        found["c"] = fastcore
    except ImportError:
        pass
    return found
