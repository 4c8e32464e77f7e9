"""Pure-Python box kernels, used when the compiled extension is unavailable.

Same contracts as ``_boxkernels.pyx``.
"""
import numpy as np


def iou_matrix(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where((union > 0) & (inter > 0), inter / union, 0.0)
    return out


def nms(boxes, scores, iou_thr):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for ii, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = order[ii + 1:]
        suppressed[rest[ious[i, rest] > iou_thr]] = True
    return np.asarray(keep, dtype=np.intp)


def greedy_match(iou, thr):
    iou = np.asarray(iou, dtype=np.float64)
    n, m = iou.shape
    match = np.full(n, -1, dtype=np.intp)
    taken = np.zeros(m, dtype=bool)
    for i in range(n):
        if m == 0:
            break
        cand = np.where(taken, -1.0, iou[i])
        best = int(np.argmax(cand))
        if not taken[best] and cand[best] >= thr:
            match[i] = best
            taken[best] = True
    return match
