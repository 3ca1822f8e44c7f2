"""Hot-loop kernels, compiled when possible.

The Cython extension ``mpnerf._kernels`` is used if it was built and
``MPNERF_PURE_PYTHON`` is not set to a truthy value; otherwise the numpy
implementations in ``mpnerf._fallback`` are used.  ``BACKEND`` names the
active choice.
"""

import os

from . import _fallback


def _want_compiled() -> bool:
    return os.environ.get("MPNERF_PURE_PYTHON", "").strip().lower() not in ("1", "true", "yes")


_impl = _fallback
BACKEND = "numpy"
if _want_compiled():
    try:
        from . import _kernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback

gather_features = _impl.gather_features
composite_forward = _impl.composite_forward
composite_backward = _impl.composite_backward

__all__ = ["BACKEND", "gather_features", "composite_forward", "composite_backward", "available_backends"]


def available_backends() -> dict:
    """Map backend name to module for every importable implementation."""
    out = {"numpy": _fallback}
    try:
        from . import _kernels

        out["cython"] = _kernels
    except ImportError:
        pass
    return out
