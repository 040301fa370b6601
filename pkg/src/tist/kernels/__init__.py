"""Numeric kernel backends.

The active backend is chosen once at import time from the TIST_NUMBA
environment variable: "0" forces the pure-numpy path, "1" requires numba
(import error if missing), anything else ("auto", unset) uses numba when
available. `get_backend` returns a specific backend for tests and
benchmarks regardless of the flag.
"""

import os
import warnings

from . import numpy_backend

_FORCE = os.environ.get("TIST_NUMBA", "auto").strip().lower()


def _import_numba_backend():
    # pin the threading layer before numba probes TBB (old TBB builds
    # trigger a noisy fallback warning at first parallel call)
    os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*TBB.*")
        from . import numba_backend
    return numba_backend


if _FORCE in ("0", "false", "off", "no"):
    _backend = numpy_backend
    backend_name = "numpy"
elif _FORCE in ("1", "true", "on", "yes"):
    _backend = _import_numba_backend()
    backend_name = "numba"
else:
    try:
        _backend = _import_numba_backend()
        backend_name = "numba"
    except ImportError:
        _backend = numpy_backend
        backend_name = "numpy"


def get_backend(name=None):
    """Return a backend module by name ("numpy" | "numba"), default active."""
    if name is None:
        return _backend
    if name == "numpy":
        return numpy_backend
    if name == "numba":
        from . import numba_backend
        return numba_backend
    raise ValueError(f"unknown backend {name!r}")


conv3x3_forward = _backend.conv3x3_forward
conv3x3_backward = _backend.conv3x3_backward
conv1x1_forward = _backend.conv1x1_forward
conv1x1_backward = _backend.conv1x1_backward
maxpool2_forward = _backend.maxpool2_forward
maxpool2_backward = _backend.maxpool2_backward
upsample2_forward = _backend.upsample2_forward
upsample2_backward = _backend.upsample2_backward
affine_warp_image = _backend.affine_warp_image
affine_warp_label = _backend.affine_warp_label
gaussian_blur = _backend.gaussian_blur
gaussian_kernel1d = numpy_backend.gaussian_kernel1d
