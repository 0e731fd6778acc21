"""Dense math kernels with a compiled core and a numpy fallback.

The backend is picked once at import time: the compiled extension when it
built, numpy otherwise. ``VTEXIT_KERNELS=python|compiled`` forces a choice
(``compiled`` raises if the extension is unavailable). Both backends share
one contract; results agree to ~1e-13 relative (summation order differs).

All operations are pure functions of their inputs: float64 in, fresh
float64 out, no shared state, safe to call from multiple threads.
"""

from __future__ import annotations

import math
import os

from . import _numpy

_CHOICE = os.environ.get("VTEXIT_KERNELS", "auto")
if _CHOICE not in ("auto", "compiled", "python"):
    raise ValueError(f"VTEXIT_KERNELS must be auto|compiled|python, got {_CHOICE!r}")

if _CHOICE == "python":
    _impl = _numpy
    BACKEND = "python"
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        if _CHOICE == "compiled":
            raise
        _impl = _numpy
        BACKEND = "python"

matmul = _impl.matmul
matmul_nt = _impl.matmul_nt
softmax_rows = _impl.softmax_rows
layer_norm_rows = _impl.layer_norm_rows
gelu_mat = _impl.gelu_mat
gelu_grad_mat = _impl.gelu_grad_mat

GELU_CUBIC = _numpy.GELU_CUBIC
GELU_SCALE = _numpy.GELU_SCALE
LN_EPS = _numpy.LN_EPS


def gelu(x: float) -> float:
    """Scalar GELU, tanh approximation with the declared constants."""
    inner = GELU_SCALE * (x + GELU_CUBIC * x**3)
    return 0.5 * x * (1.0 + math.tanh(inner))


def available_backends() -> dict[str, object]:
    """Importable backends by name; used by tests and the benchmark."""
    out: dict[str, object] = {"python": _numpy}
    try:
        from . import _core

        out["compiled"] = _core
    except ImportError:
        pass
    return out
