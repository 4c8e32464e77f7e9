"""Datasets on disk, the 7:2:1 split, and the synthetic driver-monitoring stand-in.

Layout::

    root/images/<stem>.png
    root/labels/<stem>.txt     # one "class_id cx cy w h" line per box, normalized
    root/split.txt             # optional; "[train]", "[val]", "[test]" sections of stems
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .detector import CLASS_NAMES, BBox

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class LabelError(ValueError):
    """A label problem that cannot be skipped, e.g. an out-of-range class id."""


class Target(NamedTuple):
    box: BBox
    class_id: int


@dataclass
class AnnotatedImage:
    image: torch.Tensor  # [3, H, W] float32 in [0, 1]
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))  # [N, 4] normalized cx, cy, w, h
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    source_id: str = ""

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.classes):
            raise ValueError(f"{len(self.boxes)} boxes but {len(self.classes)} class ids")

    def targets(self):
        return [Target(BBox(*map(float, b)), int(c)) for b, c in zip(self.boxes, self.classes)]


# --------------------------------------------------------------------------
# label files


def parse_label_lines(lines, num_classes=3, where="<labels>", issues=None):
    """Parse "class cx cy w h" lines.

    Malformed lines are skipped and reported as "file:line: reason" (logged and
    appended to ``issues``); an out-of-range class id raises ``LabelError``.
    """
    boxes, classes = [], []
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        problem = None
        if len(parts) != 5:
            problem = f"expected 5 fields, got {len(parts)}"
        else:
            try:
                cid = int(parts[0])
                vals = [float(p) for p in parts[1:]]
            except ValueError:
                problem = f"unparsable value in {line!r}"
            else:
                if not all(math.isfinite(v) for v in vals):
                    problem = "non-finite coordinate"
                elif not (0 <= vals[0] <= 1 and 0 <= vals[1] <= 1 and 0 < vals[2] <= 1 and 0 < vals[3] <= 1):
                    problem = f"box {vals} outside the unit square"
                elif not 0 <= cid < num_classes:
                    raise LabelError(f"{where}:{lineno}: class id {cid} not in [0, {num_classes})")
        if problem:
            msg = f"{where}:{lineno}: {problem}"
            log.warning("skipping label line %s", msg)
            if issues is not None:
                issues.append(msg)
            continue
        boxes.append(vals)
        classes.append(cid)
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4), np.asarray(classes, dtype=np.int64)


def format_label_lines(boxes, classes):
    return "".join(
        f"{int(c)} {b[0]:.6f} {b[1]:.6f} {b[2]:.6f} {b[3]:.6f}\n" for b, c in zip(np.asarray(boxes), classes)
    )


def image_to_tensor(img):
    arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).float().div_(255.0)


def tensor_to_uint8(image):
    return (image.clamp(0, 1) * 255.0).round().to(torch.uint8).permute(1, 2, 0).numpy()


def load_dataset(root, num_classes=3, issues=None):
    """Load every image under ``root/images`` with its label file (missing file: no boxes)."""
    root = Path(root)
    img_dir, lbl_dir = root / "images", root / "labels"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"{img_dir} does not exist")
    out, skipped = [], 0
    for path in sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        try:
            with Image.open(path) as img:
                image = image_to_tensor(img)
        except (OSError, UnidentifiedImageError) as exc:
            skipped += 1
            msg = f"{path}: unreadable image ({exc})"
            log.warning("skipping %s", msg)
            if issues is not None:
                issues.append(msg)
            continue
        label = lbl_dir / f"{path.stem}.txt"
        if label.exists():
            boxes, classes = parse_label_lines(
                label.read_text().splitlines(), num_classes, where=str(label), issues=issues
            )
        else:
            boxes, classes = np.zeros((0, 4)), np.zeros(0, dtype=np.int64)
        out.append(AnnotatedImage(image, boxes, classes, path.stem))
    if skipped:
        log.warning("%d unreadable image(s) skipped under %s", skipped, img_dir)
    return out


def save_sample(root, item):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    Image.fromarray(tensor_to_uint8(item.image)).save(root / "images" / f"{item.source_id}.png")
    (root / "labels" / f"{item.source_id}.txt").write_text(format_label_lines(item.boxes, item.classes))


# --------------------------------------------------------------------------
# split


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list


def split_dataset(ds, seed=0, ratios=(0.7, 0.2, 0.1)):
    """Seeded shuffle, then a contiguous 70/20/10 cut. ``ds`` is a sequence or a length."""
    n = ds if isinstance(ds, int) else len(ds)
    if n < 10:
        raise ValueError(f"need at least 10 samples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n).tolist()
    n_train = int(math.floor(ratios[0] * n + 0.5))
    n_val = int(math.floor(ratios[1] * n + 0.5))
    return DatasetSplit(perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])


def write_split(path, split, stems):
    lines = []
    for name in ("train", "val", "test"):
        lines.append(f"[{name}]")
        lines.extend(stems[i] for i in getattr(split, name))
    Path(path).write_text("\n".join(lines) + "\n")


def read_split(path):
    """Return {"train": [stems], "val": [...], "test": [...]}."""
    out = {"train": [], "val": [], "test": []}
    current = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            if current not in out:
                raise ValueError(f"{path}:{lineno}: unknown section {line}")
        elif current is None:
            raise ValueError(f"{path}:{lineno}: stem outside a section")
        else:
            out[current].append(line)
    return out


# --------------------------------------------------------------------------
# synthetic generator


def _background(rng, size):
    coarse = rng.uniform(0.25, 0.75, size=(4, 4, 3))
    img = np.asarray(
        Image.fromarray((coarse * 255).astype(np.uint8)).resize((size, size), Image.BILINEAR), dtype=np.float64
    ) / 255.0
    img += rng.normal(0.0, 0.04, size=img.shape)
    return img


def _face_mask(w, h):
    """Layers of a w x h face: (rect, ellipse, eyes) boolean masks."""
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    rect = np.ones((h, w), dtype=bool)
    ell = ((xx - w / 2) / (w / 2 - 1)) ** 2 + ((yy - h / 2) / (h / 2 - 1)) ** 2 <= 1.0
    eyes = np.zeros((h, w), dtype=bool)
    er = max(2, w // 10)
    ey = int(h * 0.4)
    for ex in (int(w * 0.32), int(w * 0.68)):
        eyes[ey - er:ey + er, ex - er:ex + er] = True
    return rect, ell, eyes


def render_sample(rng, size=160):
    """Render one synthetic image.

    Returns (image uint8 [H, W, 3], boxes [N, 4] normalized cx cy w h,
    classes [N], masks [N, H, W] bool) with every box the exact extent of its mask.
    """
    if size < 32:
        raise ValueError(f"size must be >= 32, got {size}")
    sc = size / 160  # object sizes are tuned for 160 px and scale with the image
    img = _background(rng, size)
    n_obj = int(rng.integers(1, 4))
    occupied = []
    boxes, classes, masks = [], [], []
    for _ in range(n_obj):
        cls = int(rng.integers(0, 3))
        for _attempt in range(60):
            mask = np.zeros((size, size), dtype=bool)
            layers = []
            if cls in (0, 1):
                w = int(rng.integers(round(40 * sc), round(72 * sc) + 1))
                h = int(round(w * rng.uniform(1.1, 1.3)))
                rect, ell, eyes = _face_mask(w, h)
                if cls == 1:
                    keep_left = bool(rng.integers(0, 2))
                    half = w // 2
                    sl = slice(0, half) if keep_left else slice(w - half, w)
                    rect, ell, eyes = rect[:, sl], ell[:, sl], eyes[:, sl]
                    w = rect.shape[1]
                x0 = int(rng.integers(0, size - w + 1))
                y0 = int(rng.integers(0, size - h + 1))
                skin = rng.uniform(0.55, 0.95) * np.array([1.0, 0.78, 0.62])
                frame = rng.uniform(0.05, 0.3, size=3)
                for m, color in ((rect, frame), (ell, skin), (eyes & ell, np.array([0.05, 0.05, 0.1]))):
                    full = np.zeros((size, size), dtype=bool)
                    full[y0:y0 + h, x0:x0 + w] = m
                    layers.append((full, color))
                mask[y0:y0 + h, x0:x0 + w] = rect
            else:
                length = rng.uniform(22 * sc, 48 * sc)
                thick = rng.uniform(5 * sc, 9 * sc)
                ang = np.deg2rad(rng.uniform(-25, 25))
                cx = rng.uniform(length / 2 + 2, size - length / 2 - 2)
                cy = rng.uniform(length / 2 + 2, size - length / 2 - 2)
                yy, xx = np.mgrid[0:size, 0:size] + 0.5
                u = (xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang)
                v = -(xx - cx) * np.sin(ang) + (yy - cy) * np.cos(ang)
                mask = (np.abs(u) <= length / 2) & (np.abs(v) <= thick / 2)
                screen = mask & (np.abs(u) <= length / 2 - 2) & (np.abs(v) <= thick / 2 - 1.5)
                layers = [(mask, rng.uniform(0.0, 0.12, size=3)), (screen, np.array([0.25, 0.35, 0.55]))]
            ys, xs = np.nonzero(mask)
            bx = (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
            padded = (bx[0] - 3, bx[1] - 3, bx[2] + 3, bx[3] + 3)
            if any(not (padded[2] <= o[0] or o[2] <= padded[0] or padded[3] <= o[1] or o[3] <= padded[1]) for o in occupied):
                continue
            occupied.append(bx)
            for m, color in layers:
                img[m] = color
            boxes.append(((bx[0] + bx[2]) / (2 * size), (bx[1] + bx[3]) / (2 * size), (bx[2] - bx[0]) / size, (bx[3] - bx[1]) / size))
            classes.append(cls)
            masks.append(mask)
            break
    image = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
    return (
        image,
        np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        np.asarray(classes, dtype=np.int64),
        np.asarray(masks, dtype=bool).reshape(-1, size, size),
    )


def synth_generate(n, seed, out_dir, size=160, prefix="synth"):
    """Write ``n`` synthetic images with exact labels under ``out_dir``; returns the stems."""
    if n < 10:
        raise ValueError(f"n must be >= 10, got {n}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    stems = []
    for i in range(n):
        image, boxes, classes, _ = render_sample(rng, size)
        stem = f"{prefix}_{i:05d}"
        Image.fromarray(image).save(out_dir / "images" / f"{stem}.png")
        (out_dir / "labels" / f"{stem}.txt").write_text(format_label_lines(boxes, classes))
        stems.append(stem)
    write_split(out_dir / "split.txt", split_dataset(n, seed), stems)
    return stems


def class_name(cid):
    return CLASS_NAMES[cid] if 0 <= cid < len(CLASS_NAMES) else str(cid)
