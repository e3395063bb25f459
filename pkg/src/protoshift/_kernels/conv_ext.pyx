# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled convolution kernels.

Same contract as numpy_backend: channels-last layout, zero-padded "same"
convolution with pad = kernel//2. Output pixels are processed four at a
time so each loaded weight row is reused across the tile, and the innermost
loop always runs over a contiguous channel axis, which the C compiler turns
into SIMD. Border and remainder pixels take a scalar path.
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()

NAME = "cython"

DEF TILE = 4
DEF MAXC = 256


def conv2d_forward(double[:, :, ::1] x, double[:, :, :, ::1] w,
                   double[::1] b, int stride=1):
    cdef Py_ssize_t h = x.shape[0], wd = x.shape[1], ci = x.shape[2]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], co = w.shape[3]
    if ci != w.shape[2]:
        raise ValueError("channel mismatch: input %d, kernel %d" % (ci, w.shape[2]))
    if co > MAXC or ci > MAXC:
        raise ValueError("compiled kernel supports at most %d channels" % MAXC)
    cdef Py_ssize_t ph = kh // 2, pw = kw // 2
    cdef Py_ssize_t ho = (h + 2 * ph - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pw - kw) // stride + 1
    out_arr = np.empty((ho, wo, co))
    cdef double[:, :, ::1] out = out_arr
    cdef double acc[TILE * MAXC]
    cdef double v0, v1, v2, v3
    cdef Py_ssize_t i, jt, nt, t, ki, kj, c, k, ii, jj
    cdef double* xr
    cdef double* wr
    cdef double* ob
    cdef bint interior
    for i in range(ho):
        for jt in range(0, wo, TILE):
            nt = min(TILE, wo - jt)
            for t in range(nt):
                for k in range(co):
                    acc[t * co + k] = b[k]
            for ki in range(kh):
                ii = i * stride + ki - ph
                if ii < 0 or ii >= h:
                    continue
                xr = &x[ii, 0, 0]
                for kj in range(kw):
                    jj = jt * stride + kj - pw
                    interior = (nt == TILE and jj >= 0
                                and (jt + TILE - 1) * stride + kj - pw < wd)
                    wr = &w[ki, kj, 0, 0]
                    if interior:
                        for c in range(ci):
                            v0 = xr[jj * ci + c]
                            v1 = xr[(jj + stride) * ci + c]
                            v2 = xr[(jj + 2 * stride) * ci + c]
                            v3 = xr[(jj + 3 * stride) * ci + c]
                            for k in range(co):
                                acc[k] += v0 * wr[c * co + k]
                                acc[co + k] += v1 * wr[c * co + k]
                                acc[2 * co + k] += v2 * wr[c * co + k]
                                acc[3 * co + k] += v3 * wr[c * co + k]
                    else:
                        for t in range(nt):
                            jj = (jt + t) * stride + kj - pw
                            if jj < 0 or jj >= wd:
                                continue
                            for c in range(ci):
                                v0 = xr[jj * ci + c]
                                for k in range(co):
                                    acc[t * co + k] += v0 * wr[c * co + k]
            ob = &out[i, jt, 0]
            for t in range(nt):
                for k in range(co):
                    ob[t * co + k] = acc[t * co + k]
    return out_arr


def conv2d_backward_input(double[:, :, ::1] grad_out, double[:, :, :, ::1] w,
                          int stride, int in_h, int in_w):
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], ci = w.shape[2], co = w.shape[3]
    cdef Py_ssize_t ho = grad_out.shape[0], wo = grad_out.shape[1]
    if grad_out.shape[2] != co:
        raise ValueError("grad/kernel channel mismatch")
    if co > MAXC or ci > MAXC:
        raise ValueError("compiled kernel supports at most %d channels" % MAXC)
    cdef Py_ssize_t ph = kh // 2, pw = kw // 2
    # transposed copy so the input-channel axis is contiguous in the inner loop
    wt_arr = np.ascontiguousarray(np.transpose(np.asarray(w), (0, 1, 3, 2)))
    cdef double[:, :, :, ::1] wt = wt_arr
    gx_arr = np.zeros((in_h, in_w, ci))
    cdef double[:, :, ::1] gx = gx_arr
    cdef double acc[TILE * MAXC]
    cdef double v0, v1, v2, v3
    cdef Py_ssize_t i, jt, nt, t, ki, kj, c, k, ii, jj
    cdef double* gr
    cdef double* wr
    cdef double* gxr
    cdef bint interior
    for i in range(ho):
        gr = &grad_out[i, 0, 0]
        for jt in range(0, wo, TILE):
            nt = min(TILE, wo - jt)
            for ki in range(kh):
                ii = i * stride + ki - ph
                if ii < 0 or ii >= in_h:
                    continue
                for kj in range(kw):
                    jj = jt * stride + kj - pw
                    interior = (nt == TILE and jj >= 0
                                and (jt + TILE - 1) * stride + kj - pw < in_w)
                    wr = &wt[ki, kj, 0, 0]
                    if interior:
                        for c in range(TILE * ci):
                            acc[c] = 0.0
                        for k in range(co):
                            v0 = gr[jt * co + k]
                            v1 = gr[(jt + 1) * co + k]
                            v2 = gr[(jt + 2) * co + k]
                            v3 = gr[(jt + 3) * co + k]
                            for c in range(ci):
                                acc[c] += v0 * wr[k * ci + c]
                                acc[ci + c] += v1 * wr[k * ci + c]
                                acc[2 * ci + c] += v2 * wr[k * ci + c]
                                acc[3 * ci + c] += v3 * wr[k * ci + c]
                        for t in range(TILE):
                            gxr = &gx[ii, jj + t * stride, 0]
                            for c in range(ci):
                                gxr[c] += acc[t * ci + c]
                    else:
                        for t in range(nt):
                            jj = (jt + t) * stride + kj - pw
                            if jj < 0 or jj >= in_w:
                                continue
                            gxr = &gx[ii, jj, 0]
                            for k in range(co):
                                v0 = gr[(jt + t) * co + k]
                                for c in range(ci):
                                    gxr[c] += v0 * wr[k * ci + c]
    return gx_arr


def conv2d_backward_weights(double[:, :, ::1] x, double[:, :, ::1] grad_out,
                            int kh, int kw, int stride):
    cdef Py_ssize_t h = x.shape[0], wd = x.shape[1], ci = x.shape[2]
    cdef Py_ssize_t ho = grad_out.shape[0], wo = grad_out.shape[1], co = grad_out.shape[2]
    if co > MAXC or ci > MAXC:
        raise ValueError("compiled kernel supports at most %d channels" % MAXC)
    cdef Py_ssize_t ph = kh // 2, pw = kw // 2
    gw_arr = np.zeros((kh, kw, ci, co))
    gb_arr = np.zeros(co)
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef double v0, v1, v2, v3
    cdef Py_ssize_t i, j, jt, nt, t, ki, kj, c, k, ii, jj
    cdef double* gr
    cdef double* xr
    cdef double* wr
    cdef double* g0
    cdef double* g1
    cdef double* g2
    cdef double* g3
    cdef bint interior
    for i in range(ho):
        gr = &grad_out[i, 0, 0]
        for j in range(wo):
            for k in range(co):
                gb[k] += gr[j * co + k]
    for ki in range(kh):
        for kj in range(kw):
            for i in range(ho):
                ii = i * stride + ki - ph
                if ii < 0 or ii >= h:
                    continue
                xr = &x[ii, 0, 0]
                gr = &grad_out[i, 0, 0]
                for jt in range(0, wo, TILE):
                    nt = min(TILE, wo - jt)
                    jj = jt * stride + kj - pw
                    interior = (nt == TILE and jj >= 0
                                and (jt + TILE - 1) * stride + kj - pw < wd)
                    if interior:
                        g0 = gr + jt * co
                        g1 = gr + (jt + 1) * co
                        g2 = gr + (jt + 2) * co
                        g3 = gr + (jt + 3) * co
                        for c in range(ci):
                            v0 = xr[jj * ci + c]
                            v1 = xr[(jj + stride) * ci + c]
                            v2 = xr[(jj + 2 * stride) * ci + c]
                            v3 = xr[(jj + 3 * stride) * ci + c]
                            wr = &gw[ki, kj, c, 0]
                            for k in range(co):
                                wr[k] += v0 * g0[k] + v1 * g1[k] + v2 * g2[k] + v3 * g3[k]
                    else:
                        for t in range(nt):
                            jj = (jt + t) * stride + kj - pw
                            if jj < 0 or jj >= wd:
                                continue
                            g0 = gr + (jt + t) * co
                            for c in range(ci):
                                v0 = xr[jj * ci + c]
                                wr = &gw[ki, kj, c, 0]
                                for k in range(co):
                                    wr[k] += v0 * g0[k]
    return gw_arr, gb_arr
