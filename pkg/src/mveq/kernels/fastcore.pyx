# Compiled kernel core: sequential C loops, float64 accumulation.
# Contracts match mveq.kernels.numpy_backend exactly (see that module's
# docstrings); keep the two in sync.

import numpy as np

cimport numpy as cnp

cnp.import_array()


def nn_argmax(cnp.float64_t[:, ::1] cand, cnp.float64_t[:, ::1] queries):
    cdef Py_ssize_t m = cand.shape[0]
    cdef Py_ssize_t c = cand.shape[1]
    cdef Py_ssize_t n = queries.shape[0]
    idx_arr = np.empty(n, dtype=np.int64)
    score_arr = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] idx = idx_arr
    cdef cnp.float64_t[::1] score = score_arr
    cdef Py_ssize_t i, j, k, best_j
    cdef double s, best_s
    with nogil:
        for i in range(n):
            best_j = 0
            best_s = -1e300
            for j in range(m):
                s = 0.0
                for k in range(c):
                    s += cand[j, k] * queries[i, k]
                if s > best_s:
                    best_s = s
                    best_j = j
            idx[i] = best_j
            score[i] = best_s
    return idx_arr, score_arr


def bilinear_gather(cnp.float32_t[:, :, ::1] data, xs, ys):
    cdef cnp.float64_t[::1] gx = np.ascontiguousarray(xs, dtype=np.float64)
    cdef cnp.float64_t[::1] gy = np.ascontiguousarray(ys, dtype=np.float64)
    cdef Py_ssize_t h = data.shape[0]
    cdef Py_ssize_t w = data.shape[1]
    cdef Py_ssize_t c = data.shape[2]
    cdef Py_ssize_t n = gx.shape[0]
    out_arr = np.empty((n, c), dtype=np.float64)
    cdef cnp.float64_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, k, x0, y0, x1, y1
    cdef double x, y, fx, fy, w00, w01, w10, w11
    with nogil:
        for i in range(n):
            x = gx[i]
            y = gy[i]
            if x < 0.0:
                x = 0.0
            if x > w - 1.0:
                x = w - 1.0
            if y < 0.0:
                y = 0.0
            if y > h - 1.0:
                y = h - 1.0
            x0 = <Py_ssize_t> x
            y0 = <Py_ssize_t> y
            if w > 1 and x0 > w - 2:
                x0 = w - 2
            if h > 1 and y0 > h - 2:
                y0 = h - 2
            x1 = x0 + 1 if x0 + 1 < w else w - 1
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            fx = x - x0
            fy = y - y0
            w00 = (1.0 - fy) * (1.0 - fx)
            w01 = (1.0 - fy) * fx
            w10 = fy * (1.0 - fx)
            w11 = fy * fx
            for k in range(c):
                out[i, k] = (<double> data[y0, x0, k]) * w00 \
                    + (<double> data[y0, x1, k]) * w01 \
                    + (<double> data[y1, x0, k]) * w10 \
                    + (<double> data[y1, x1, k]) * w11
    return out_arr


def bilinear_scatter(Py_ssize_t h, Py_ssize_t w, xs, ys, cnp.float64_t[:, ::1] vals):
    cdef cnp.float64_t[::1] gx = np.ascontiguousarray(xs, dtype=np.float64)
    cdef cnp.float64_t[::1] gy = np.ascontiguousarray(ys, dtype=np.float64)
    cdef Py_ssize_t n = gx.shape[0]
    cdef Py_ssize_t c = vals.shape[1]
    out_arr = np.zeros((h, w, c), dtype=np.float64)
    cdef cnp.float64_t[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, k, x0, y0, x1, y1
    cdef double x, y, fx, fy, w00, w01, w10, w11
    with nogil:
        for i in range(n):
            x = gx[i]
            y = gy[i]
            if x < 0.0:
                x = 0.0
            if x > w - 1.0:
                x = w - 1.0
            if y < 0.0:
                y = 0.0
            if y > h - 1.0:
                y = h - 1.0
            x0 = <Py_ssize_t> x
            y0 = <Py_ssize_t> y
            if w > 1 and x0 > w - 2:
                x0 = w - 2
            if h > 1 and y0 > h - 2:
                y0 = h - 2
            x1 = x0 + 1 if x0 + 1 < w else w - 1
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            fx = x - x0
            fy = y - y0
            w00 = (1.0 - fy) * (1.0 - fx)
            w01 = (1.0 - fy) * fx
            w10 = fy * (1.0 - fx)
            w11 = fy * fx
            for k in range(c):
                out[y0, x0, k] += vals[i, k] * w00
                out[y0, x1, k] += vals[i, k] * w01
                out[y1, x0, k] += vals[i, k] * w10
                out[y1, x1, k] += vals[i, k] * w11
    return out_arr


def conv3x3_forward(cnp.float64_t[:, :, ::1] x, cnp.float64_t[:, :, :, ::1] weights,
                    cnp.float64_t[::1] bias):
    cdef Py_ssize_t h = x.shape[0]
    cdef Py_ssize_t w = x.shape[1]
    cdef Py_ssize_t ci = x.shape[2]
    cdef Py_ssize_t co = weights.shape[0]
    out_arr = np.empty((h, w, co), dtype=np.float64)
    cdef cnp.float64_t[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, o, k, ki, kj, ii, jj
    cdef double acc
    with nogil:
        for i in range(h):
            for j in range(w):
                for o in range(co):
                    acc = bias[o]
                    for ki in range(3):
                        ii = i + ki - 1
                        if ii < 0 or ii >= h:
                            continue
                        for kj in range(3):
                            jj = j + kj - 1
                            if jj < 0 or jj >= w:
                                continue
                            for k in range(ci):
                                acc += x[ii, jj, k] * weights[o, k, ki, kj]
                    out[i, j, o] = acc
    return out_arr


def conv3x3_backward(cnp.float64_t[:, :, ::1] x, cnp.float64_t[:, :, :, ::1] weights,
                     cnp.float64_t[:, :, ::1] d_out):
    cdef Py_ssize_t h = x.shape[0]
    cdef Py_ssize_t w = x.shape[1]
    cdef Py_ssize_t ci = x.shape[2]
    cdef Py_ssize_t co = weights.shape[0]
    dx_arr = np.zeros((h, w, ci), dtype=np.float64)
    dw_arr = np.zeros((co, ci, 3, 3), dtype=np.float64)
    db_arr = np.zeros(co, dtype=np.float64)
    cdef cnp.float64_t[:, :, ::1] dx = dx_arr
    cdef cnp.float64_t[:, :, :, ::1] dw = dw_arr
    cdef cnp.float64_t[::1] db = db_arr
    cdef Py_ssize_t i, j, o, k, ki, kj, ii, jj
    cdef double g
    with nogil:
        for i in range(h):
            for j in range(w):
                for o in range(co):
                    g = d_out[i, j, o]
                    db[o] += g
                    for ki in range(3):
                        ii = i + ki - 1
                        if ii < 0 or ii >= h:
                            continue
                        for kj in range(3):
                            jj = j + kj - 1
                            if jj < 0 or jj >= w:
                                continue
                            for k in range(ci):
                                dx[ii, jj, k] += g * weights[o, k, ki, kj]
                                dw[o, k, ki, kj] += g * x[ii, jj, k]
    return dx_arr, dw_arr, db_arr
