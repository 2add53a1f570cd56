# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Semantics match ``_kernels_py`` exactly."""
import math

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def lap_solve(cost):
    cdef double[:, ::1] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t nr = c.shape[0], nc = c.shape[1]
    cdef double[::1] u = np.zeros(nr)
    cdef double[::1] v = np.zeros(nc)
    cdef double[::1] shortest = np.empty(nc)
    cdef cnp.int64_t[::1] col4row = np.full(nr, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] row4col = np.full(nc, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] path = np.full(nc, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] remaining = np.empty(nc, dtype=np.int64)
    cdef cnp.uint8_t[::1] scanned_rows = np.zeros(nr, dtype=np.uint8)
    cdef cnp.uint8_t[::1] scanned_cols = np.zeros(nc, dtype=np.uint8)
    cdef Py_ssize_t cur_row, it, num_remaining, index, i, j, sink, tmp
    cdef double min_val, lowest, r, sj

    for cur_row in range(nr):
        for j in range(nc):
            shortest[j] = INFINITY
            scanned_cols[j] = 0
            remaining[j] = nc - j - 1
        for i in range(nr):
            scanned_rows[i] = 0
        num_remaining = nc
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            scanned_rows[i] = 1
            index = -1
            lowest = INFINITY
            for it in range(num_remaining):
                j = remaining[it]
                r = min_val + c[i, j] - u[i] - v[j]
                if r < shortest[j]:
                    path[j] = i
                    shortest[j] = r
                sj = shortest[j]
                if sj < lowest or (sj == lowest and row4col[j] == -1):
                    lowest = sj
                    index = it
            min_val = lowest
            if min_val == INFINITY:
                return None
            j = remaining[index]
            if row4col[j] == -1:
                sink = j
            else:
                i = row4col[j]
            scanned_cols[j] = 1
            num_remaining -= 1
            remaining[index] = remaining[num_remaining]

        u[cur_row] += min_val
        for i in range(nr):
            if scanned_rows[i] and i != cur_row:
                u[i] += min_val - shortest[col4row[i]]
        for j in range(nc):
            if scanned_cols[j]:
                v[j] -= min_val - shortest[j]

        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            tmp = col4row[i]
            col4row[i] = j
            j = tmp
            if i == cur_row:
                break
    return np.asarray(col4row)


cdef inline double _iou(const double[:, ::1] a, Py_ssize_t ia,
                        const double[:, ::1] b, Py_ssize_t ib) nogil:
    cdef double iw = min(a[ia, 2], b[ib, 2]) - max(a[ia, 0], b[ib, 0])
    cdef double ih = min(a[ia, 3], b[ib, 3]) - max(a[ia, 1], b[ib, 1])
    cdef double inter, union
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = ((a[ia, 2] - a[ia, 0]) * (a[ia, 3] - a[ia, 1])
             + (b[ib, 2] - b[ib, 0]) * (b[ib, 3] - b[ib, 1]) - inter)
    return inter / union


def pairwise_iou(a, b):
    cdef const double[:, ::1] av = np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    cdef const double[:, ::1] bv = np.ascontiguousarray(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    cdef Py_ssize_t n = av.shape[0], m = bv.shape[0], i, j
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            for j in range(m):
                o[i, j] = _iou(av, i, bv, j)
    return out


def match_ranked(pred_h, pred_o, gt_lo, gt_hi, gt_h, gt_o, double thr):
    cdef const double[:, ::1] ph = np.ascontiguousarray(np.asarray(pred_h, dtype=np.float64).reshape(-1, 4))
    cdef const double[:, ::1] po = np.ascontiguousarray(np.asarray(pred_o, dtype=np.float64).reshape(-1, 4))
    cdef const double[:, ::1] gh = np.ascontiguousarray(np.asarray(gt_h, dtype=np.float64).reshape(-1, 4))
    cdef const double[:, ::1] go = np.ascontiguousarray(np.asarray(gt_o, dtype=np.float64).reshape(-1, 4))
    cdef const cnp.int64_t[::1] lo = np.ascontiguousarray(gt_lo, dtype=np.int64)
    cdef const cnp.int64_t[::1] hi = np.ascontiguousarray(gt_hi, dtype=np.int64)
    cdef Py_ssize_t n = ph.shape[0], p, g, best
    cdef double best_ov, ih, io, ov
    used_arr = np.zeros(gh.shape[0], dtype=np.uint8)
    flags_arr = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] used = used_arr
    cdef cnp.uint8_t[::1] flags = flags_arr
    with nogil:
        for p in range(n):
            best = -1
            best_ov = -1.0
            for g in range(lo[p], hi[p]):
                if used[g]:
                    continue
                ih = _iou(ph, p, gh, g)
                if ih <= thr:
                    continue
                io = _iou(po, p, go, g)
                if io <= thr:
                    continue
                ov = min(ih, io)
                if ov > best_ov:
                    best_ov = ov
                    best = g
            if best >= 0:
                used[best] = 1
                flags[p] = 1
    return flags_arr


def all_point_ap(tp, Py_ssize_t n_gt):
    cdef const cnp.uint8_t[::1] t = np.ascontiguousarray(tp, dtype=np.uint8)
    cdef Py_ssize_t n = t.shape[0], k
    cdef double ctp = 0.0, area = 0.0, best = 0.0, prev_rec
    if n_gt <= 0:
        return math.nan
    if n == 0:
        return 0.0
    prec_arr = np.empty(n)
    rec_arr = np.empty(n)
    cdef double[::1] prec = prec_arr
    cdef double[::1] rec = rec_arr
    for k in range(n):
        ctp += t[k]
        prec[k] = ctp / (k + 1)
        rec[k] = ctp / n_gt
    # sweep from the right keeping the precision envelope
    for k in range(n - 1, -1, -1):
        if prec[k] > best:
            best = prec[k]
        prec[k] = best
    prev_rec = 0.0
    for k in range(n):
        if rec[k] != prev_rec:
            area += (rec[k] - prev_rec) * prec[k]
            prev_rec = rec[k]
    return area
