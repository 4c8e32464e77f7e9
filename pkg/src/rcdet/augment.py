"""Training-time augmentation: horizontal flip and four-image mosaic."""
import numpy as np
import torch
import torch.nn.functional as F

from .data import AnnotatedImage

FILL = 0.5
MIN_BOX_AREA = 1e-4  # normalized; smaller boxes are dropped after clipping


def hflip(item):
    """Mirror the image left-right; only box centers move (cx -> 1 - cx)."""
    boxes = item.boxes.copy()
    boxes[:, 0] = 1.0 - boxes[:, 0]
    return AnnotatedImage(item.image.flip(-1), boxes, item.classes.copy(), item.source_id)


def _quadrants(xc, yc, s):
    """Canvas and source rectangles (x1, y1, x2, y2) for the four s x s tiles around (xc, yc)."""
    out = []
    # top-left, top-right, bottom-left, bottom-right
    a = (max(xc - s, 0), max(yc - s, 0), xc, yc)
    out.append((a, (s - (a[2] - a[0]), s - (a[3] - a[1]), s, s)))
    a = (xc, max(yc - s, 0), min(xc + s, 2 * s), yc)
    out.append((a, (0, s - (a[3] - a[1]), a[2] - a[0], s)))
    a = (max(xc - s, 0), yc, xc, min(yc + s, 2 * s))
    out.append((a, (s - (a[2] - a[0]), 0, s, a[3] - a[1])))
    a = (xc, yc, min(xc + s, 2 * s), min(yc + s, 2 * s))
    out.append((a, (0, 0, a[2] - a[0], a[3] - a[1])))
    return out


def mosaic_canvas(items, rng=None, center=None):
    """Paste four same-size square images around a center on a 2x canvas.

    Returns the full-resolution canvas as an ``AnnotatedImage`` with boxes in
    canvas-normalized coordinates, clipped to their tile; tiny boxes are dropped.
    """
    if len(items) != 4:
        raise ValueError(f"mosaic needs exactly 4 images, got {len(items)}")
    c, s, s2 = items[0].image.shape
    if s != s2 or any(it.image.shape != items[0].image.shape for it in items):
        raise ValueError("mosaic inputs must share one square shape")
    if center is None:
        rng = np.random.default_rng(rng)
        center = (int(rng.integers(s // 2, 3 * s // 2 + 1)), int(rng.integers(s // 2, 3 * s // 2 + 1)))
    xc, yc = center
    canvas = torch.full((c, 2 * s, 2 * s), FILL, dtype=items[0].image.dtype)
    all_boxes, all_classes = [], []
    for it, (dst, src) in zip(items, _quadrants(xc, yc, s)):
        canvas[:, dst[1]:dst[3], dst[0]:dst[2]] = it.image[:, src[1]:src[3], src[0]:src[2]]
        if len(it.boxes) == 0:
            continue
        b = it.boxes * s
        x1 = b[:, 0] - b[:, 2] / 2 + dst[0] - src[0]
        y1 = b[:, 1] - b[:, 3] / 2 + dst[1] - src[1]
        x2 = b[:, 0] + b[:, 2] / 2 + dst[0] - src[0]
        y2 = b[:, 1] + b[:, 3] / 2 + dst[1] - src[1]
        x1, x2 = np.clip(x1, dst[0], dst[2]), np.clip(x2, dst[0], dst[2])
        y1, y2 = np.clip(y1, dst[1], dst[3]), np.clip(y2, dst[1], dst[3])
        xyxy = np.stack([x1, y1, x2, y2], 1) / (2 * s)
        area = (xyxy[:, 2] - xyxy[:, 0]) * (xyxy[:, 3] - xyxy[:, 1])
        keep = area >= MIN_BOX_AREA
        xyxy = xyxy[keep]
        all_boxes.append(
            np.stack([(xyxy[:, 0] + xyxy[:, 2]) / 2, (xyxy[:, 1] + xyxy[:, 3]) / 2, xyxy[:, 2] - xyxy[:, 0], xyxy[:, 3] - xyxy[:, 1]], 1)
        )
        all_classes.append(it.classes[keep])
    boxes = np.concatenate(all_boxes) if all_boxes else np.zeros((0, 4))
    classes = np.concatenate(all_classes) if all_classes else np.zeros(0, dtype=np.int64)
    return AnnotatedImage(canvas, boxes, classes, "+".join(it.source_id for it in items))


def mosaic(items, rng=None, center=None):
    """Four-image mosaic resized back to the input size by 2x2 averaging."""
    big = mosaic_canvas(items, rng, center)
    small = F.avg_pool2d(big.image.unsqueeze(0), 2).squeeze(0)
    return AnnotatedImage(small, big.boxes, big.classes, big.source_id)
