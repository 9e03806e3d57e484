"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``AFFKP_PURE_PYTHON=1`` to force the numpy fallback.
"""

from __future__ import annotations

import os

from . import _fallback

GAUSSIAN = _fallback.GAUSSIAN
FLAT = _fallback.FLAT

_compiled = None
if os.environ.get("AFFKP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[no-redef]
    except ImportError:
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _fallback


def zbuffer(u, v, z, width, height):
    return _impl.zbuffer(u, v, z, int(width), int(height))


def mean_shift_seeds(votes, seeds, bandwidth, kernel, tol, max_iter):
    return _impl.mean_shift_seeds(votes, seeds, float(bandwidth), int(kernel), float(tol), int(max_iter))


def backends():
    """Available implementations keyed by name, for tests and benchmarks."""
    out = {"python": _fallback}
    if _compiled is not None:
        out["compiled"] = _compiled
    return out


def neighbour_max(p, rel, wp, nbr):
    return _impl.neighbour_max(p, rel, wp, nbr)


def neighbour_max_backward(dz, arg, nbr, rel):
    return _impl.neighbour_max_backward(dz, arg, nbr, rel)
