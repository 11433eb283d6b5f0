"""Backend selection for the hot loops.

The compiled extension ``emodan._kernels`` is used when it imports; otherwise
the numpy versions in ``emodan._kernels_py`` take over. ``use_backend`` lets
tests and the benchmark pin either one explicitly.
"""
from __future__ import annotations

import numpy as np

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled

_active = _compiled if _compiled is not None else _kernels_py


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def backend_name() -> str:
    return "compiled" if _active is _compiled else "python"


def use_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    _active = _BACKENDS[name]


def _c(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def conv3x3_forward(x, k, bias):
    return _active.conv3x3_forward(_c(x), _c(k), _c(bias))


def conv3x3_backward(x, k, gout, need_gx: bool = True):
    return _active.conv3x3_backward(_c(x), _c(k), _c(gout), need_gx)


def maxpool2_forward(x):
    return _active.maxpool2_forward(_c(x))


def maxpool2_backward(gout, arg):
    return _active.maxpool2_backward(_c(gout), np.ascontiguousarray(arg, dtype=np.int8))


def warp_bilinear(img, inv, out_h: int, out_w: int):
    """Batched inverse-mapping warp; ``inv`` rows are (a, b, tx, ty) of the output->source map."""
    return _active.warp_bilinear(_c(img), _c(inv), int(out_h), int(out_w))


def heatmap(pts, h: int, w: int, sigma: float):
    return _active.heatmap(_c(pts), int(h), int(w), float(sigma))
