"""Convolution kernel backends.

The compiled extension is preferred when importable; the numpy fallback is
always available.  Set METACONV_NO_EXT=1 to force the fallback.  Both
backends implement the same four functions with identical tie-breaking, so
they are interchangeable (results agree to floating-point accumulation
order).
"""
from __future__ import annotations

import os

from . import numpy_backend

_backend = numpy_backend
if not os.environ.get("METACONV_NO_EXT"):
    try:
        from . import _convext as _ext
        _backend = _ext
    except ImportError:
        pass

BACKEND = _backend.NAME

conv2d_forward = _backend.conv2d_forward
conv2d_weight_grad = _backend.conv2d_weight_grad
maxpool2_forward = _backend.maxpool2_forward
maxpool2_backward = _backend.maxpool2_backward


def available_backends():
    names = [numpy_backend.NAME]
    try:
        from . import _convext
        names.append(_convext.NAME)
    except ImportError:
        pass
    return names


def get_backend(name: str):
    """Fetch a backend module by name ('numpy' or 'ext')."""
    if name == "numpy":
        return numpy_backend
    if name == "ext":
        from . import _convext
        return _convext
    raise ValueError(f"unknown backend {name!r}")
