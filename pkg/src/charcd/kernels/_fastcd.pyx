# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled batched scoring kernels.

Same contract as the numpy fallback: score M candidate character sets for
one word against a set of head columns.  The CNN kernel is a straight
C loop; the LSTM kernel keeps the recurrent matmuls in BLAS (via numpy)
and fuses all the elementwise gate arithmetic into one typed pass.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, tanh

cnp.import_array()

NAME = "compiled"


cdef inline double _sig(double x) noexcept nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline double _relu(double x) noexcept nogil:
    return x if x > 0.0 else 0.0


def cnn_cd_scores(cnp.int32_t[:, ::1] win_pos, double[:, ::1] win_contrib,
                  double[::1] total, double[::1] bias,
                  cnp.uint8_t[:, ::1] masks, double[:, ::1] wcols):
    cdef Py_ssize_t M = masks.shape[0]
    cdef Py_ssize_t F = win_pos.shape[0]
    cdef Py_ssize_t K = win_pos.shape[1]
    cdef Py_ssize_t C = wcols.shape[1]
    out = np.zeros((M, C))
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t m, f, k, c
    cdef cnp.int32_t p
    cdef double beta, gamma, b, bc
    with nogil:
        for m in range(M):
            for f in range(F):
                beta = 0.0
                for k in range(K):
                    p = win_pos[f, k]
                    if p >= 0 and masks[m, p]:
                        beta += win_contrib[f, k]
                gamma = total[f] - beta
                b = bias[f]
                bc = (2.0 * _relu(beta)
                      + (_relu(beta + gamma) - _relu(gamma))
                      + (_relu(beta + b) - _relu(b))
                      + 2.0 * (_relu(beta + gamma + b) - _relu(gamma + b))) / 6.0
                if bc != 0.0:
                    for c in range(C):
                        ov[m, c] += bc * wcols[f, c]
    return out


cdef inline void _s3(double R, double I, double B, bint is_tanh,
                     double* lr, double* li, double* lb,
                     double* ftot) noexcept nogil:
    cdef double f0, fr, fi, fb, fri, frb, fib, ft
    if is_tanh:
        f0 = 0.0
        fr = tanh(R); fi = tanh(I); fb = tanh(B)
        fri = tanh(R + I); frb = tanh(R + B); fib = tanh(I + B)
        ft = tanh(R + I + B)
    else:
        f0 = 0.5
        fr = _sig(R); fi = _sig(I); fb = _sig(B)
        fri = _sig(R + I); frb = _sig(R + B); fib = _sig(I + B)
        ft = _sig(R + I + B)
    lr[0] = (2.0 * (fr - f0) + (fri - fi) + (frb - fb) + 2.0 * (ft - fib)) / 6.0
    li[0] = (2.0 * (fi - f0) + (fri - fr) + (fib - fb) + 2.0 * (ft - frb)) / 6.0
    lb[0] = (2.0 * (fb - f0) + (frb - fr) + (fib - fi) + 2.0 * (ft - fri)) / 6.0 + f0
    ftot[0] = ft


cdef void _lstm_step(double[:, ::1] vr, double[:, ::1] vi,
                     double[::1] xw_t, double[::1] b,
                     cnp.uint8_t[:] mcol,
                     double[:, ::1] beta_c, double[:, ::1] gamma_c,
                     double[:, ::1] beta_h, double[:, ::1] gamma_h,
                     Py_ssize_t H) noexcept nogil:
    cdef Py_ssize_t m = vr.shape[0]
    cdef Py_ssize_t mi, h, ji, jf, jg, jo
    cdef double Ri, Ii, Rf, If, Rg, Ig, Ro, Io
    cdef double ri, ii, bi, rf, if_, bf, rg, ig, bg, ro, io, bo
    cdef double ft, ot, dummy
    cdef double bc, gc, th_b, th_g, th_s, tb, tg
    for mi in range(m):
        for h in range(H):
            ji = h
            jf = H + h
            jg = 2 * H + h
            jo = 3 * H + h
            if mcol[mi]:
                Ri = vr[mi, ji] + xw_t[ji]; Ii = vi[mi, ji]
                Rf = vr[mi, jf] + xw_t[jf]; If = vi[mi, jf]
                Rg = vr[mi, jg] + xw_t[jg]; Ig = vi[mi, jg]
                Ro = vr[mi, jo] + xw_t[jo]; Io = vi[mi, jo]
            else:
                Ri = vr[mi, ji]; Ii = vi[mi, ji] + xw_t[ji]
                Rf = vr[mi, jf]; If = vi[mi, jf] + xw_t[jf]
                Rg = vr[mi, jg]; Ig = vi[mi, jg] + xw_t[jg]
                Ro = vr[mi, jo]; Io = vi[mi, jo] + xw_t[jo]
            _s3(Ri, Ii, b[ji], 0, &ri, &ii, &bi, &dummy)
            _s3(Rf, If, b[jf], 0, &rf, &if_, &bf, &ft)
            _s3(Rg, Ig, b[jg], 1, &rg, &ig, &bg, &dummy)
            _s3(Ro, Io, b[jo], 0, &ro, &io, &bo, &ot)
            bc = (rf + bf) * beta_c[mi, h] + ri * (rg + bg) + bi * rg
            gc = (if_ * beta_c[mi, h] + ft * gamma_c[mi, h]
                  + ri * ig + ii * (rg + ig + bg) + bi * (ig + bg))
            beta_c[mi, h] = bc
            gamma_c[mi, h] = gc
            th_b = tanh(bc)
            th_g = tanh(gc)
            th_s = tanh(bc + gc)
            tb = 0.5 * (th_b + th_s - th_g)
            tg = 0.5 * (th_g + th_s - th_b)
            beta_h[mi, h] = (ro + bo) * tb
            gamma_h[mi, h] = io * tb + ot * tg


def _lstm_direction(xw, V, b, masks_u8, bint reverse):
    cdef Py_ssize_t T = xw.shape[0]
    cdef Py_ssize_t H = V.shape[0]
    cdef Py_ssize_t m = masks_u8.shape[0]
    beta_c = np.zeros((m, H))
    gamma_c = np.zeros((m, H))
    beta_h = np.zeros((m, H))
    gamma_h = np.zeros((m, H))
    vr = np.empty((m, 4 * H))
    vi = np.empty((m, 4 * H))
    cdef double[:, ::1] xw_v = xw
    cdef double[::1] b_v = b
    cdef cnp.uint8_t[:, ::1] mk = masks_u8
    cdef double[:, ::1] bc_v = beta_c
    cdef double[:, ::1] gc_v = gamma_c
    cdef double[:, ::1] bh_v = beta_h
    cdef double[:, ::1] gh_v = gamma_h
    cdef double[:, ::1] vr_v = vr
    cdef double[:, ::1] vi_v = vi
    cdef Py_ssize_t t
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        np.dot(beta_h, V, out=vr)
        np.dot(gamma_h, V, out=vi)
        _lstm_step(vr_v, vi_v, xw_v[t], b_v, mk[:, t],
                   bc_v, gc_v, bh_v, gh_v, H)
    return beta_h


def lstm_cd_scores(xw_fw, wh_fw, b_fw, xw_bw, wh_bw, b_bw, masks, wcols,
                   int chunk=1024):
    masks_u8 = np.ascontiguousarray(masks, dtype=np.uint8)
    cdef Py_ssize_t M = masks_u8.shape[0]
    out = np.empty((M, wcols.shape[1]))
    cdef Py_ssize_t s
    for s in range(0, M, chunk):
        mk = masks_u8[s:s + chunk]
        bh_f = _lstm_direction(xw_fw, wh_fw, b_fw, mk, False)
        bh_b = _lstm_direction(xw_bw, wh_bw, b_bw, mk, True)
        out[s:s + chunk] = np.hstack([bh_f, bh_b]) @ wcols
    return out
