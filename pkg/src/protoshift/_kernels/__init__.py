"""Convolution kernel backends.

The compiled extension is used when it imported cleanly; otherwise the numpy
fallback takes over. Set PROTOSHIFT_KERNELS=numpy (or =cython) to force a
choice; forcing cython raises if the extension is missing.
"""
from __future__ import annotations

import os

from . import numpy_backend

_forced = os.environ.get("PROTOSHIFT_KERNELS", "").strip().lower()

if _forced in ("numpy", "python"):
    active = numpy_backend
elif _forced == "cython":
    from . import conv_ext as active  # noqa: F401
else:
    try:
        from . import conv_ext as active  # type: ignore[no-redef]
    except ImportError:
        active = numpy_backend

BACKEND_NAME: str = active.NAME

conv2d_forward = active.conv2d_forward
conv2d_backward_input = active.conv2d_backward_input
conv2d_backward_weights = active.conv2d_backward_weights


def available_backends() -> list:
    """Importable backend modules, fallback first."""
    found = [numpy_backend]
    try:
        from . import conv_ext

        found.append(conv_ext)
    except ImportError:
        pass
    return found
