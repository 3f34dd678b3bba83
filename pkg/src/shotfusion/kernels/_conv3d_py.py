"""Pure-numpy conv3d kernels with the same signatures as the compiled ones.

Two formulations live here:

* ``im2col`` builds a strided window view and contracts it with one
  ``tensordot``; this is the fast path without the extension.
* ``shift`` loops over kernel offsets and accumulates shifted slices, i.e.
  the direct-loop algorithm vectorized over output positions.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_extent(p, k, s):
    return (p - k) // s + 1


def _windows(xp, kt, kh, kw, st, sh, sw):
    win = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))
    return win[:, :, ::st, ::sh, ::sw]


def im2col_forward(xp, w, st, sh, sw):
    kt, kh, kw = w.shape[2:]
    win = _windows(xp, kt, kh, kw, st, sh, sw)  # N, Ci, To, Ho, Wo, kt, kh, kw
    out = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))  # N, To, Ho, Wo, Co
    return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))


def im2col_backward_weight(g, xp, kt, kh, kw, st, sh, sw):
    win = _windows(xp, kt, kh, kw, st, sh, sw)
    out = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))  # Co, Ci, kt, kh, kw
    return np.ascontiguousarray(out)


def shift_forward(xp, w, st, sh, sw):
    N, Ci, Tp, Hp, Wp = xp.shape
    Co, _, kt, kh, kw = w.shape
    To, Ho, Wo = _out_extent(Tp, kt, st), _out_extent(Hp, kh, sh), _out_extent(Wp, kw, sw)
    out = np.zeros((N, Co, To, Ho, Wo), dtype=xp.dtype)
    for dt in range(kt):
        for dh in range(kh):
            for dw in range(kw):
                patch = xp[:, :, dt:dt + st * (To - 1) + 1:st,
                           dh:dh + sh * (Ho - 1) + 1:sh,
                           dw:dw + sw * (Wo - 1) + 1:sw]
                out += np.einsum("nctuv,oc->notuv", patch, w[:, :, dt, dh, dw])
    return out


def backward_input(g, w, Tp, Hp, Wp, st, sh, sw):
    N, Co, To, Ho, Wo = g.shape
    Ci, kt, kh, kw = w.shape[1:]
    gx = np.zeros((N, Ci, Tp, Hp, Wp), dtype=g.dtype)
    for dt in range(kt):
        for dh in range(kh):
            for dw in range(kw):
                contrib = np.tensordot(g, w[:, :, dt, dh, dw], axes=([1], [0]))  # N, To, Ho, Wo, Ci
                gx[:, :, dt:dt + st * (To - 1) + 1:st,
                   dh:dh + sh * (Ho - 1) + 1:sh,
                   dw:dw + sw * (Wo - 1) + 1:sw] += contrib.transpose(0, 4, 1, 2, 3)
    return gx


def shift_backward_weight(g, xp, kt, kh, kw, st, sh, sw):
    N, Co, To, Ho, Wo = g.shape
    Ci = xp.shape[1]
    gw = np.zeros((Co, Ci, kt, kh, kw), dtype=g.dtype)
    for dt in range(kt):
        for dh in range(kh):
            for dw in range(kw):
                patch = xp[:, :, dt:dt + st * (To - 1) + 1:st,
                           dh:dh + sh * (Ho - 1) + 1:sh,
                           dw:dw + sw * (Wo - 1) + 1:sw]
                gw[:, :, dt, dh, dw] = np.tensordot(g, patch, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return gw
