"""Hot loops behind the conv/pool layers, with two interchangeable backends.

``_hot`` is a Cython extension compiled at install time; ``_numpy`` is a
pure-numpy fallback with identical signatures.  The active backend is
chosen at import: the extension when importable, else numpy.  Override
with ``STRIDER_KERNELS=ext|numpy`` or :func:`use`.  The script
``benchmarks/bench_kernels.py`` compares the two.

Backend surface (arrays C-contiguous, float32 or float64):

    im2col(x, k, cols)             (n,c,h,w) -> (n*P, Q) patch matrix
    col2im(dcols, cols, shape, k)  scatter-add transpose of im2col
    maxpool2(x)                    2x2 stride-2 max pool -> (y, argwin)
    maxpool2_grad(dy, argwin)      route each gradient to its argmax cell

``cols`` is an int64 (Q, 3) array of (channel, dy, dx) kernel positions,
in the column order of the lowered feature matrix (channel-major, then
dy, then dx).  ``argwin`` holds the flat 2x2-window index (dy*2+dx) of
each pooled maximum; ties resolve to the lowest index, so exactly one
input position per window receives the gradient.
"""

from __future__ import annotations

import os

from . import _numpy

_BACKENDS = {"numpy": _numpy}
try:  # compiled extension is optional
    from . import _hot

    _BACKENDS["ext"] = _hot
except ImportError:
    _hot = None

_env = os.environ.get("STRIDER_KERNELS", "").strip().lower()
if _env and _env not in _BACKENDS:
    if _env == "ext":
        raise ImportError(
            "STRIDER_KERNELS=ext requested but the compiled extension is "
            "not available; reinstall with a C compiler or unset the variable"
        )
    raise ValueError(f"unknown STRIDER_KERNELS backend {_env!r}")

_active = _BACKENDS[_env] if _env else _BACKENDS.get("ext", _numpy)


def backend_name() -> str:
    return "ext" if _active is _BACKENDS.get("ext") else "numpy"


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def get_backend(name: str):
    return _BACKENDS[name]


def use(name: str) -> None:
    """Switch the active backend (tests and benchmarks)."""
    global _active
    _active = _BACKENDS[name]


def im2col(x, k, cols):
    return _active.im2col(x, k, cols)


def col2im(dcols, cols, shape, k):
    return _active.col2im(dcols, cols, shape, k)


def maxpool2(x):
    return _active.maxpool2(x)


def maxpool2_grad(dy, argwin):
    return _active.maxpool2_grad(dy, argwin)
