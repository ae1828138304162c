# Compiled implementations of the hot kernels: direct 3D convolution and
# trilinear grid sampling, forward and backward.  Plain sequential
# accumulation throughout, so results are bit-reproducible run to run.
# Signatures mirror numpy_backend; dispatch happens in kernels/__init__.

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double

NAME = "ext"


def conv3d_forward(floating[:, :, :, :, ::1] x, floating[:, :, :, :, ::1] w,
                   int stride, int pad):
    cdef Py_ssize_t b_n = x.shape[0], ci_n = x.shape[1]
    cdef Py_ssize_t d = x.shape[2], h = x.shape[3], wd = x.shape[4]
    cdef Py_ssize_t co_n = w.shape[0]
    cdef Py_ssize_t kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t do = (d + 2 * pad - kd) // stride + 1
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - kw) // stride + 1

    dtype = np.float32 if floating is float else np.float64
    y_arr = np.zeros((b_n, co_n, do, ho, wo), dtype=dtype)
    cdef floating[:, :, :, :, ::1] y = y_arr

    cdef Py_ssize_t b, co, ci, od, oh, ow, a, bb, c, id_, ih, iw
    cdef floating acc
    for b in range(b_n):
        for co in range(co_n):
            for od in range(do):
                for oh in range(ho):
                    for ow in range(wo):
                        acc = 0
                        for ci in range(ci_n):
                            for a in range(kd):
                                id_ = od * stride + a - pad
                                if id_ < 0 or id_ >= d:
                                    continue
                                for bb in range(kh):
                                    ih = oh * stride + bb - pad
                                    if ih < 0 or ih >= h:
                                        continue
                                    for c in range(kw):
                                        iw = ow * stride + c - pad
                                        if iw < 0 or iw >= wd:
                                            continue
                                        acc = acc + x[b, ci, id_, ih, iw] * w[co, ci, a, bb, c]
                        y[b, co, od, oh, ow] = acc
    return y_arr


def conv3d_backward(floating[:, :, :, :, ::1] x, floating[:, :, :, :, ::1] w,
                    int stride, int pad, floating[:, :, :, :, ::1] gy):
    cdef Py_ssize_t b_n = x.shape[0], ci_n = x.shape[1]
    cdef Py_ssize_t d = x.shape[2], h = x.shape[3], wd = x.shape[4]
    cdef Py_ssize_t co_n = w.shape[0]
    cdef Py_ssize_t kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t do = gy.shape[2], ho = gy.shape[3], wo = gy.shape[4]

    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.zeros((b_n, ci_n, d, h, wd), dtype=dtype)
    gw_arr = np.zeros((co_n, ci_n, kd, kh, kw), dtype=dtype)
    cdef floating[:, :, :, :, ::1] gx = gx_arr
    cdef floating[:, :, :, :, ::1] gw = gw_arr

    cdef Py_ssize_t b, co, ci, od, oh, ow, a, bb, c, id_, ih, iw
    cdef floating g
    for b in range(b_n):
        for co in range(co_n):
            for od in range(do):
                for oh in range(ho):
                    for ow in range(wo):
                        g = gy[b, co, od, oh, ow]
                        for ci in range(ci_n):
                            for a in range(kd):
                                id_ = od * stride + a - pad
                                if id_ < 0 or id_ >= d:
                                    continue
                                for bb in range(kh):
                                    ih = oh * stride + bb - pad
                                    if ih < 0 or ih >= h:
                                        continue
                                    for c in range(kw):
                                        iw = ow * stride + c - pad
                                        if iw < 0 or iw >= wd:
                                            continue
                                        gx[b, ci, id_, ih, iw] += g * w[co, ci, a, bb, c]
                                        gw[co, ci, a, bb, c] += g * x[b, ci, id_, ih, iw]
    return gx_arr, gw_arr


cdef inline void _axis(floating u, Py_ssize_t n, Py_ssize_t* i0,
                       floating* t, bint* clamped) nogil:
    cdef floating g
    if n == 1:
        i0[0] = 0
        t[0] = 0
        clamped[0] = True
        return
    g = u * (n - 1)
    clamped[0] = not (g > 0 and g < n - 1)
    if g < 0:
        g = 0
    elif g > n - 1:
        g = n - 1
    i0[0] = <Py_ssize_t> g
    if i0[0] > n - 2:
        i0[0] = n - 2
    t[0] = g - i0[0]


def grid_sample_forward(floating[:, :, :, ::1] value, floating[:, ::1] coords):
    cdef Py_ssize_t c_n = value.shape[0]
    cdef Py_ssize_t d = value.shape[1], h = value.shape[2], w = value.shape[3]
    cdef Py_ssize_t p_n = coords.shape[0]

    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((p_n, c_n), dtype=dtype)
    cdef floating[:, ::1] out = out_arr

    cdef Py_ssize_t p, c, i0, j0, k0, i1, j1, k1
    cdef floating td, th, tw
    cdef bint cd, ch, cw
    cdef floating w000, w001, w010, w011, w100, w101, w110, w111
    for p in range(p_n):
        _axis(coords[p, 0], d, &i0, &td, &cd)
        _axis(coords[p, 1], h, &j0, &th, &ch)
        _axis(coords[p, 2], w, &k0, &tw, &cw)
        i1 = i0 + 1 if i0 + 1 < d else d - 1
        j1 = j0 + 1 if j0 + 1 < h else h - 1
        k1 = k0 + 1 if k0 + 1 < w else w - 1
        w000 = (1 - td) * (1 - th) * (1 - tw)
        w001 = (1 - td) * (1 - th) * tw
        w010 = (1 - td) * th * (1 - tw)
        w011 = (1 - td) * th * tw
        w100 = td * (1 - th) * (1 - tw)
        w101 = td * (1 - th) * tw
        w110 = td * th * (1 - tw)
        w111 = td * th * tw
        for c in range(c_n):
            out[p, c] = (w000 * value[c, i0, j0, k0] + w001 * value[c, i0, j0, k1]
                         + w010 * value[c, i0, j1, k0] + w011 * value[c, i0, j1, k1]
                         + w100 * value[c, i1, j0, k0] + w101 * value[c, i1, j0, k1]
                         + w110 * value[c, i1, j1, k0] + w111 * value[c, i1, j1, k1])
    return out_arr


def grid_sample_backward(floating[:, :, :, ::1] value, floating[:, ::1] coords,
                         floating[:, ::1] gy):
    cdef Py_ssize_t c_n = value.shape[0]
    cdef Py_ssize_t d = value.shape[1], h = value.shape[2], w = value.shape[3]
    cdef Py_ssize_t p_n = coords.shape[0]

    dtype = np.float32 if floating is float else np.float64
    gvalue_arr = np.zeros((c_n, d, h, w), dtype=dtype)
    gcoords_arr = np.zeros((p_n, 3), dtype=dtype)
    cdef floating[:, :, :, ::1] gv = gvalue_arr
    cdef floating[:, ::1] gc = gcoords_arr

    cdef Py_ssize_t p, c, i0, j0, k0, i1, j1, k1
    cdef floating td, th, tw, g, dd, dh, dw
    cdef bint cd, ch, cw
    cdef floating v000, v001, v010, v011, v100, v101, v110, v111
    for p in range(p_n):
        _axis(coords[p, 0], d, &i0, &td, &cd)
        _axis(coords[p, 1], h, &j0, &th, &ch)
        _axis(coords[p, 2], w, &k0, &tw, &cw)
        i1 = i0 + 1 if i0 + 1 < d else d - 1
        j1 = j0 + 1 if j0 + 1 < h else h - 1
        k1 = k0 + 1 if k0 + 1 < w else w - 1
        dd = 0
        dh = 0
        dw = 0
        for c in range(c_n):
            g = gy[p, c]
            v000 = value[c, i0, j0, k0]
            v001 = value[c, i0, j0, k1]
            v010 = value[c, i0, j1, k0]
            v011 = value[c, i0, j1, k1]
            v100 = value[c, i1, j0, k0]
            v101 = value[c, i1, j0, k1]
            v110 = value[c, i1, j1, k0]
            v111 = value[c, i1, j1, k1]
            gv[c, i0, j0, k0] += g * (1 - td) * (1 - th) * (1 - tw)
            gv[c, i0, j0, k1] += g * (1 - td) * (1 - th) * tw
            gv[c, i0, j1, k0] += g * (1 - td) * th * (1 - tw)
            gv[c, i0, j1, k1] += g * (1 - td) * th * tw
            gv[c, i1, j0, k0] += g * td * (1 - th) * (1 - tw)
            gv[c, i1, j0, k1] += g * td * (1 - th) * tw
            gv[c, i1, j1, k0] += g * td * th * (1 - tw)
            gv[c, i1, j1, k1] += g * td * th * tw
            dd += g * ((1 - th) * (1 - tw) * (v100 - v000) + (1 - th) * tw * (v101 - v001)
                       + th * (1 - tw) * (v110 - v010) + th * tw * (v111 - v011))
            dh += g * ((1 - td) * (1 - tw) * (v010 - v000) + (1 - td) * tw * (v011 - v001)
                       + td * (1 - tw) * (v110 - v100) + td * tw * (v111 - v101))
            dw += g * ((1 - td) * (1 - th) * (v001 - v000) + (1 - td) * th * (v011 - v010)
                       + td * (1 - th) * (v101 - v100) + td * th * (v111 - v110))
        if not cd:
            gc[p, 0] = dd * (d - 1)
        if not ch:
            gc[p, 1] = dh * (h - 1)
        if not cw:
            gc[p, 2] = dw * (w - 1)
    return gvalue_arr, gcoords_arr
