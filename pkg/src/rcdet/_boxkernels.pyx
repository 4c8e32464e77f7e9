# cython: language_level=3
"""Compiled box-geometry kernels: IoU matrix, greedy NMS, greedy detection matching.

Boxes are float64 arrays of corner coordinates (x1, y1, x2, y2).
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline double _iou(double ax1, double ay1, double ax2, double ay2,
                        double bx1, double by1, double bx2, double by2) nogil:
    cdef double iw = min(ax2, bx2) - max(ax1, bx1)
    cdef double ih = min(ay2, by2) - max(ay1, by1)
    cdef double inter, union
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            for j in range(m):
                o[i, j] = _iou(a[i, 0], a[i, 1], a[i, 2], a[i, 3],
                               b[j, 0], b[j, 1], b[j, 2], b[j, 3])
    return out


def nms(const double[:, ::1] boxes, const double[::1] scores, double iou_thr):
    cdef Py_ssize_t n = boxes.shape[0], ii, jj, i, j, nkeep = 0
    order_arr = np.argsort(-np.asarray(scores), kind="stable").astype(np.intp)
    cdef Py_ssize_t[::1] order = order_arr
    suppressed_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] suppressed = suppressed_arr
    keep_arr = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] keep = keep_arr
    with nogil:
        for ii in range(n):
            i = order[ii]
            if suppressed[i]:
                continue
            keep[nkeep] = i
            nkeep += 1
            for jj in range(ii + 1, n):
                j = order[jj]
                if suppressed[j]:
                    continue
                if _iou(boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3],
                        boxes[j, 0], boxes[j, 1], boxes[j, 2], boxes[j, 3]) > iou_thr:
                    suppressed[j] = 1
    return keep_arr[:nkeep].copy()


def greedy_match(const double[:, ::1] iou, double thr):
    """Rows are detections already in descending score order; columns are ground truths."""
    cdef Py_ssize_t n = iou.shape[0], m = iou.shape[1], i, j, best
    cdef double best_iou
    match_arr = np.full(n, -1, dtype=np.intp)
    cdef Py_ssize_t[::1] match = match_arr
    taken_arr = np.zeros(m, dtype=np.uint8)
    cdef unsigned char[::1] taken = taken_arr
    with nogil:
        for i in range(n):
            best = -1
            best_iou = -1.0
            for j in range(m):
                if not taken[j] and iou[i, j] > best_iou:
                    best_iou = iou[i, j]
                    best = j
            if best >= 0 and best_iou >= thr:
                match[i] = best
                taken[best] = 1
    return match_arr
