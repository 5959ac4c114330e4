"""Backend selection for the geometric hot loops.

The compiled extension is used when it was built; otherwise the numpy
versions are used. Set ``EGOPLAN_KERNELS=python`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("EGOPLAN_KERNELS", "").lower() not in ("python", "py", "numpy"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

min_dist_points = _impl.min_dist_points
min_dist_polyline = _impl.min_dist_polyline
obb_separation = _impl.obb_separation
obb_overlap_many = _impl.obb_overlap_many
response_squeeze = _impl.response_squeeze
response_head = _impl.response_head
response_backprop = _impl.response_backprop

__all__ = ["BACKEND", "min_dist_points", "min_dist_polyline", "obb_separation", "obb_overlap_many",
           "response_squeeze", "response_head", "response_backprop"]
