"""Box geometry and the kernel backend switch.

The compiled kernels are used when importable; ``RCDET_PURE_PYTHON=1`` forces
the fallback.
"""
import os

import numpy as np

from . import _boxkernels_py

if os.environ.get("RCDET_PURE_PYTHON"):
    _kernels = _boxkernels_py
else:
    try:
        from . import _boxkernels as _kernels
    except ImportError:
        _kernels = _boxkernels_py

BACKEND = "compiled" if _kernels is not _boxkernels_py else "python"


def _as_boxes(x):
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1, 4))


def cxcywh_to_xyxy(b):
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:4] / 2
    return np.concatenate([b[..., 0:2] - half, b[..., 0:2] + half], axis=-1)


def xyxy_to_cxcywh(b):
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([(b[..., 0:2] + b[..., 2:4]) / 2, b[..., 2:4] - b[..., 0:2]], axis=-1)


def iou_matrix(a, b, backend=None):
    """Pairwise IoU of corner-format boxes, shape ``[len(a), len(b)]``."""
    k = _pick(backend)
    return k.iou_matrix(_as_boxes(a), _as_boxes(b))


def box_iou(a, b):
    """IoU of two corner-format boxes; zero-area union gives 0."""
    return float(iou_matrix([a], [b])[0, 0])


def nms(boxes, scores, iou_thr, backend=None):
    """Greedy NMS. Returns kept indices in descending score order (ties by index)."""
    k = _pick(backend)
    scores = np.ascontiguousarray(np.asarray(scores, dtype=np.float64).reshape(-1))
    return np.asarray(k.nms(_as_boxes(boxes), scores, float(iou_thr)), dtype=np.intp)


def batched_nms(boxes, scores, classes, iou_thr, backend=None):
    """Per-class NMS; result sorted by descending score."""
    boxes = _as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    classes = np.asarray(classes).reshape(-1)
    keep = []
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        keep.append(idx[nms(boxes[idx], scores[idx], iou_thr, backend)])
    if not keep:
        return np.zeros(0, dtype=np.intp)
    keep = np.concatenate(keep)
    return keep[np.argsort(-scores[keep], kind="stable")]


def greedy_match(iou, thr, backend=None):
    """Match score-sorted detections (rows) to ground truths (columns).

    Each detection takes the still-unmatched ground truth of highest IoU when
    that IoU reaches ``thr``. Returns the matched column per row, -1 if none.
    """
    k = _pick(backend)
    iou = np.ascontiguousarray(np.asarray(iou, dtype=np.float64))
    if iou.ndim != 2:
        raise ValueError(f"iou must be 2-D, got shape {iou.shape}")
    return np.asarray(k.greedy_match(iou, float(thr)), dtype=np.intp)


def _pick(backend):
    if backend is None:
        return _kernels
    if backend == "python":
        return _boxkernels_py
    if backend == "compiled":
        if _kernels is _boxkernels_py:
            raise RuntimeError("compiled box kernels are not available in this install")
        return _kernels
    raise ValueError(f"unknown backend {backend!r}")
