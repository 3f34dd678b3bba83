"""Hot conv3d kernels: compiled direct loops when the extension is built, numpy otherwise.

The backend is picked once at import.  ``set_backend("python")`` forces the
numpy implementation (used by the benchmark and by tests that exercise both).

Method names seen by callers:

``direct``  direct cross-correlation loops (compiled; numpy shift-and-add fallback)
``im2col``  strided window view + one tensor contraction (numpy, always available)
``auto``    ``direct`` on the compiled backend, ``im2col`` on the python one
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import _conv3d_py as _py

try:
    from . import _conv3d_ext as _ext
except ImportError:  # extension not built
    _ext = None

HAVE_COMPILED = _ext is not None
METHODS = ("auto", "direct", "im2col")

_backend = "compiled" if HAVE_COMPILED else "python"


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in ("compiled", "python"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "compiled" and not HAVE_COMPILED:
        raise RuntimeError("compiled kernels are not built; run `pip install -e .` with Cython available")
    _backend = name


@contextmanager
def use_backend(name: str):
    prev = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def _resolve(method: str) -> str:
    if method not in METHODS:
        raise ValueError(f"unknown conv3d method {method!r}; expected one of {METHODS}")
    if method == "auto":
        return "direct" if _backend == "compiled" else "im2col"
    return method


def conv3d_forward(xp: np.ndarray, w: np.ndarray, stride, method: str = "auto") -> np.ndarray:
    st, sh, sw = stride
    m = _resolve(method)
    if m == "im2col":
        return _py.im2col_forward(xp, w, st, sh, sw)
    if _backend == "compiled":
        return _ext.conv3d_forward(np.ascontiguousarray(xp), np.ascontiguousarray(w, dtype=xp.dtype),
                                   st, sh, sw)
    return _py.shift_forward(xp, w, st, sh, sw)


def conv3d_backward_input(g: np.ndarray, w: np.ndarray, padded_shape, stride,
                          method: str = "auto") -> np.ndarray:
    st, sh, sw = stride
    Tp, Hp, Wp = padded_shape[2:]
    m = _resolve(method)
    if m == "direct" and _backend == "compiled":
        return _ext.conv3d_backward_input(np.ascontiguousarray(g), np.ascontiguousarray(w, dtype=g.dtype),
                                          Tp, Hp, Wp, st, sh, sw)
    return _py.backward_input(g, w, Tp, Hp, Wp, st, sh, sw)


def conv3d_backward_weight(g: np.ndarray, xp: np.ndarray, ksize, stride,
                           method: str = "auto") -> np.ndarray:
    st, sh, sw = stride
    kt, kh, kw = ksize
    m = _resolve(method)
    if m == "im2col":
        return _py.im2col_backward_weight(g, xp, kt, kh, kw, st, sh, sw)
    if _backend == "compiled":
        return _ext.conv3d_backward_weight(np.ascontiguousarray(g), np.ascontiguousarray(xp),
                                           kt, kh, kw, st, sh, sw)
    return _py.shift_backward_weight(g, xp, kt, kh, kw, st, sh, sw)
