# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Direct 3D cross-correlation kernels (no column matrix is materialized).

Every output position walks the K = Ci*kt*kh*kw receptive-field offsets of the
zero-padded input once; the innermost loop runs over output channels against a
[K, Co] transposed weight so it stays contiguous.  Accumulation is in double
for both float32 and float64 storage, in a fixed order (deterministic).
"""
import numpy as np

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _extent(Py_ssize_t p, Py_ssize_t k, Py_ssize_t s) nogil:
    return (p - k) // s + 1


def _offsets(Py_ssize_t Ci, Py_ssize_t kt, Py_ssize_t kh, Py_ssize_t kw,
             Py_ssize_t sC, Py_ssize_t sT, Py_ssize_t sH):
    out = np.empty(Ci * kt * kh * kw, dtype=np.intp)
    cdef Py_ssize_t[::1] off = out
    cdef Py_ssize_t ci, dt, dh, dw, k = 0
    for ci in range(Ci):
        for dt in range(kt):
            for dh in range(kh):
                for dw in range(kw):
                    off[k] = ci * sC + dt * sT + dh * sH + dw
                    k += 1
    return out


def conv3d_forward(real[:, :, :, :, ::1] xp, real[:, :, :, :, ::1] w,
                   Py_ssize_t st, Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t N = xp.shape[0], Ci = xp.shape[1]
    cdef Py_ssize_t Tp = xp.shape[2], Hp = xp.shape[3], Wp = xp.shape[4]
    cdef Py_ssize_t Co = w.shape[0], kt = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t To = _extent(Tp, kt, st), Ho = _extent(Hp, kh, sh), Wo = _extent(Wp, kw, sw)
    cdef Py_ssize_t K = Ci * kt * kh * kw, P = To * Ho * Wo
    cdef Py_ssize_t sH = Wp, sT = Hp * Wp, sC = Tp * Hp * Wp, sN = Ci * Tp * Hp * Wp
    dtype = np.float64 if real is double else np.float32
    out = np.zeros((N, Co, To, Ho, Wo), dtype=dtype)
    if out.size == 0:
        return out
    cdef double[:, ::1] wt = np.ascontiguousarray(np.asarray(w, dtype=np.float64).reshape(Co, K).T)
    cdef Py_ssize_t[::1] off = _offsets(Ci, kt, kh, kw, sC, sT, sH)
    cdef double[::1] acc = np.zeros(Co, dtype=np.float64)
    cdef real[:, :, :, :, ::1] o = out
    cdef real* optr = &o[0, 0, 0, 0, 0]
    cdef real* xptr = &xp[0, 0, 0, 0, 0]
    cdef double* wptr = &wt[0, 0]
    cdef double* a = &acc[0]
    cdef double* wrow
    cdef double xv
    cdef Py_ssize_t n, ot, oh, ow, k, co, base, p
    with nogil:
        for n in range(N):
            for ot in range(To):
                for oh in range(Ho):
                    for ow in range(Wo):
                        base = n * sN + ot * st * sT + oh * sh * sH + ow * sw
                        for co in range(Co):
                            a[co] = 0.0
                        for k in range(K):
                            xv = xptr[base + off[k]]
                            wrow = wptr + k * Co
                            for co in range(Co):
                                a[co] += xv * wrow[co]
                        p = (ot * Ho + oh) * Wo + ow
                        for co in range(Co):
                            optr[(n * Co + co) * P + p] = <real>a[co]
    return out


def conv3d_backward_input(real[:, :, :, :, ::1] g, real[:, :, :, :, ::1] w,
                          Py_ssize_t Tp, Py_ssize_t Hp, Py_ssize_t Wp,
                          Py_ssize_t st, Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t N = g.shape[0], Co = g.shape[1]
    cdef Py_ssize_t To = g.shape[2], Ho = g.shape[3], Wo = g.shape[4]
    cdef Py_ssize_t Ci = w.shape[1], kt = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t K = Ci * kt * kh * kw, P = To * Ho * Wo
    cdef Py_ssize_t sH = Wp, sT = Hp * Wp, sC = Tp * Hp * Wp, sN = Ci * Tp * Hp * Wp
    gxd = np.zeros((N, Ci, Tp, Hp, Wp), dtype=np.float64)
    if g.size == 0 or gxd.size == 0:
        return gxd.astype(np.float64 if real is double else np.float32)
    cdef double[:, ::1] wt = np.ascontiguousarray(np.asarray(w, dtype=np.float64).reshape(Co, K).T)
    cdef Py_ssize_t[::1] off = _offsets(Ci, kt, kh, kw, sC, sT, sH)
    cdef double[::1] gvec = np.zeros(Co, dtype=np.float64)
    cdef double[:, :, :, :, ::1] gx = gxd
    cdef double* gxptr = &gx[0, 0, 0, 0, 0]
    cdef real* gptr = &g[0, 0, 0, 0, 0]
    cdef double* wptr = &wt[0, 0]
    cdef double* gv = &gvec[0]
    cdef double* wrow
    cdef double s
    cdef Py_ssize_t n, ot, oh, ow, k, co, base, p
    with nogil:
        for n in range(N):
            for ot in range(To):
                for oh in range(Ho):
                    for ow in range(Wo):
                        base = n * sN + ot * st * sT + oh * sh * sH + ow * sw
                        p = (ot * Ho + oh) * Wo + ow
                        for co in range(Co):
                            gv[co] = gptr[(n * Co + co) * P + p]
                        for k in range(K):
                            wrow = wptr + k * Co
                            s = 0.0
                            for co in range(Co):
                                s += gv[co] * wrow[co]
                            gxptr[base + off[k]] += s
    if real is double:
        return gxd
    return gxd.astype(np.float32)


def conv3d_backward_weight(real[:, :, :, :, ::1] g, real[:, :, :, :, ::1] xp,
                           Py_ssize_t kt, Py_ssize_t kh, Py_ssize_t kw,
                           Py_ssize_t st, Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t N = g.shape[0], Co = g.shape[1]
    cdef Py_ssize_t To = g.shape[2], Ho = g.shape[3], Wo = g.shape[4]
    cdef Py_ssize_t Ci = xp.shape[1], Tp = xp.shape[2], Hp = xp.shape[3], Wp = xp.shape[4]
    cdef Py_ssize_t K = Ci * kt * kh * kw, P = To * Ho * Wo
    cdef Py_ssize_t sH = Wp, sT = Hp * Wp, sC = Tp * Hp * Wp, sN = Ci * Tp * Hp * Wp
    gwt = np.zeros((K, Co), dtype=np.float64)
    dtype = np.float64 if real is double else np.float32
    if g.size == 0 or K == 0:
        return np.ascontiguousarray(gwt.T.reshape(Co, Ci, kt, kh, kw).astype(dtype))
    cdef Py_ssize_t[::1] off = _offsets(Ci, kt, kh, kw, sC, sT, sH)
    cdef double[::1] gvec = np.zeros(Co, dtype=np.float64)
    cdef double[:, ::1] gw = gwt
    cdef double* gwptr = &gw[0, 0]
    cdef real* gptr = &g[0, 0, 0, 0, 0]
    cdef real* xptr = &xp[0, 0, 0, 0, 0]
    cdef double* gv = &gvec[0]
    cdef double* row
    cdef double xv
    cdef Py_ssize_t n, ot, oh, ow, k, co, base, p
    with nogil:
        for n in range(N):
            for ot in range(To):
                for oh in range(Ho):
                    for ow in range(Wo):
                        base = n * sN + ot * st * sT + oh * sh * sH + ow * sw
                        p = (ot * Ho + oh) * Wo + ow
                        for co in range(Co):
                            gv[co] = gptr[(n * Co + co) * P + p]
                        for k in range(K):
                            xv = xptr[base + off[k]]
                            row = gwptr + k * Co
                            for co in range(Co):
                                row[co] += xv * gv[co]
    return np.ascontiguousarray(gwt.T.reshape(Co, Ci, kt, kh, kw).astype(dtype))
