"""Target assignment, detection loss, SGD + cosine schedule training loop, evaluation."""
import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augment import hflip, mosaic
from .detector import CLASS_NAMES, decode_boxes, decode_predictions, encode_box, save_checkpoint
from .metrics import evaluate

log = logging.getLogger(__name__)

BOX_WEIGHT = 5.0
METRICS_COLUMNS = ["epoch", "lr", "loss_total", "loss_cls", "loss_box", "val_map50", "val_map5095"]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr0: float = 0.001
    momentum: float = 0.937
    weight_decay: float = 0.0005
    epochs: int = 100
    lr_min: float = 0.0
    seed: int = 0
    mosaic: bool = True
    hflip_prob: float = 0.5
    close_mosaic: float = 0.1  # fraction of final epochs trained without mosaic
    workers: int = 0  # >0 prefetches batches on a thread pool
    eval_conf: float = 0.001
    eval_nms_iou: float = 0.6
    report_conf: float = 0.25

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0 <= self.hflip_prob <= 1:
            raise ValueError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def cosine_lr(epoch, cfg):
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1 + math.cos(math.pi * epoch / cfg.epochs))


# --------------------------------------------------------------------------
# targets and loss


@dataclass
class TargetAssignment:
    """Per-scale dense targets.

    ``cls[i]`` is [B, nc, H, W] one-hot at positives, ``box[i]`` [B, 4, H, W]
    normalized (cx, cy, w, h), ``raw[i]`` the regressor values decoding to
    ``box[i]``, ``mask[i]`` [B, H, W] bool. ``cells`` lists
    (image, gt index, scale index, gy, gx) per assigned ground truth.
    """

    input_size: int
    strides: tuple
    cls: list
    box: list
    raw: list
    mask: list
    cells: list
    dropped: int = 0

    @property
    def num_pos(self):
        return len(self.cells)


def pick_scale(w, h, input_size, strides=(8, 16, 32)):
    """Index of the largest stride whose 2x cell fits inside the box's longer side.

    A side exactly at the boundary goes to the finer scale.
    """
    side = max(w, h) * input_size
    for i in range(len(strides) - 1, -1, -1):
        if side > 2 * strides[i] + 1e-9:
            return i
    return 0


def assign_targets(gts, num_classes, input_size, strides=(8, 16, 32), dtype=torch.float32):
    """Center-cell assignment of each box to one cell at its size-matched scale.

    ``gts`` holds one (boxes [N, 4] normalized cx cy w h, classes [N]) pair per
    image. A box whose cell is already taken moves to the nearest scale that is
    free and can represent it; otherwise it is dropped and counted.
    """
    bsz = len(gts)
    sizes = [input_size // s for s in strides]
    cls = [torch.zeros(bsz, num_classes, n, n, dtype=dtype) for n in sizes]
    box = [torch.zeros(bsz, 4, n, n, dtype=dtype) for n in sizes]
    raw = [torch.zeros(bsz, 4, n, n, dtype=dtype) for n in sizes]
    mask = [torch.zeros(bsz, n, n, dtype=torch.bool) for n in sizes]
    cells, dropped = [], 0
    for b, (boxes, classes) in enumerate(gts):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        for j, (bx, c) in enumerate(zip(boxes, np.asarray(classes).reshape(-1))):
            first = pick_scale(bx[2], bx[3], input_size, strides)
            order = sorted(range(len(strides)), key=lambda i: (abs(i - first), i))
            for si in order:
                s, n = strides[si], sizes[si]
                gx = min(int(bx[0] * input_size / s), n - 1)
                gy = min(int(bx[1] * input_size / s), n - 1)
                if mask[si][b, gy, gx]:
                    continue
                try:
                    t = encode_box(tuple(bx), gx, gy, s, input_size)
                except ValueError:
                    continue
                mask[si][b, gy, gx] = True
                cls[si][b, int(c), gy, gx] = 1.0
                box[si][b, :, gy, gx] = torch.as_tensor(bx, dtype=dtype)
                raw[si][b, :, gy, gx] = torch.as_tensor(t, dtype=dtype)
                cells.append((b, j, si, gy, gx))
                break
            else:
                dropped += 1
    if dropped:
        log.debug("%d ground-truth box(es) could not be assigned", dropped)
    return TargetAssignment(input_size, tuple(strides), cls, box, raw, mask, cells, dropped)


def _cxcywh_iou(a, b, eps=1e-12):
    """Plain IoU between [N, 4] center-format boxes."""
    ax1, ay1, ax2, ay2 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2, a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx1, by1, bx2, by2 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2, b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = (torch.minimum(ax2, bx2) - torch.maximum(ax1, bx1)).clamp(min=0)
    ih = (torch.minimum(ay2, by2) - torch.maximum(ay1, by1)).clamp(min=0)
    inter = iw * ih
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    return inter / (union + eps)


def detection_loss(raw, ta):
    """total = cls + 5 * box, each summed and divided by the batch size.

    cls: binary cross-entropy of every class logit at every cell.
    box: (1 - IoU) between decoded and target boxes over positive cells.
    """
    bsz = raw[0].shape[0]
    cls_loss = raw[0].new_zeros(())
    box_loss = raw[0].new_zeros(())
    for si, (grid, stride) in enumerate(zip(raw, ta.strides)):
        nc = grid.shape[1] - 4
        tgt = ta.cls[si].to(grid.dtype)
        if grid.shape[-2:] != tgt.shape[-2:] or tgt.shape[1] != nc:
            raise ValueError(f"scale {si}: predictions {tuple(grid.shape)} vs targets {tuple(tgt.shape)}")
        cls_loss = cls_loss + F.binary_cross_entropy_with_logits(grid[:, :nc], tgt, reduction="sum")
        m = ta.mask[si]
        if m.any():
            pred = decode_boxes(grid[:, nc:], stride, ta.input_size).permute(0, 2, 3, 1)[m]
            true = ta.box[si].to(grid.dtype).permute(0, 2, 3, 1)[m]
            box_loss = box_loss + (1.0 - _cxcywh_iou(pred, true)).sum()
    cls_loss = cls_loss / bsz
    box_loss = box_loss / bsz
    return cls_loss + BOX_WEIGHT * box_loss, {"cls": cls_loss, "box": box_loss}


# --------------------------------------------------------------------------
# loop


def predict(model, items, conf_thresh=0.25, nms_iou=0.5, batch_size=32):
    """Per-image detection lists for a list of ``AnnotatedImage``."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            for i in range(0, len(items), batch_size):
                x = torch.stack([it.image for it in items[i:i + batch_size]])
                out.extend(decode_predictions(model(x), conf_thresh, nms_iou, x.shape[-1]))
    finally:
        model.train(was_training)
    return out


def evaluate_model(model, items, conf_thresh=0.001, nms_iou=0.6, report_conf=0.25):
    dets = predict(model, items, conf_thresh, nms_iou)
    gts = [it.targets() for it in items]
    nc = model.cfg.num_classes
    names = list(CLASS_NAMES[:nc]) + [str(c) for c in range(len(CLASS_NAMES), nc)]
    return evaluate(dets, gts, nc, names, conf_thresh=report_conf)


def _make_sample(items, idx, rng, use_mosaic, hflip_prob):
    item = items[idx]
    if use_mosaic:
        others = rng.integers(0, len(items), size=3)
        item = mosaic([item] + [items[j] for j in others], rng)
    if rng.random() < hflip_prob:
        item = hflip(item)
    return item


def _make_batch(items, indices, seed, epoch, bi, use_mosaic, hflip_prob):
    rng = np.random.default_rng([seed, epoch, bi])
    batch = [_make_sample(items, i, rng, use_mosaic, hflip_prob) for i in indices]
    return torch.stack([b.image for b in batch]), [(b.boxes, b.classes) for b in batch]


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def train(model, train_items, val_items, cfg, out_dir=None, progress=None, stop_after=None):
    """Run ``cfg.epochs`` epochs of momentum SGD under the per-epoch cosine schedule.

    Logs one row per epoch (see ``METRICS_COLUMNS``) and, with ``out_dir``,
    writes metrics.csv plus best.pt (by validation mAP@50) and last.pt.
    ``stop_after`` ends the run early without changing the schedule.
    Returns the list of logged rows.
    """
    if not train_items:
        raise TrainingError("training split is empty")
    seed_everything(cfg.seed)
    mcfg = model.cfg
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if p.ndim <= 1 else decay).append(p)
    opt = torch.optim.SGD(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.lr0,
        momentum=cfg.momentum,
    )
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    n = len(train_items)
    nb = max(1, n // cfg.batch_size) if n >= cfg.batch_size else 1
    mosaic_off_from = cfg.epochs - int(round(cfg.close_mosaic * cfg.epochs))
    history, best = [], -1.0
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 0 else None
    try:
        for epoch in range(cfg.epochs if stop_after is None else min(stop_after, cfg.epochs)):
            lr = cosine_lr(epoch, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            use_mosaic = cfg.mosaic and epoch < mosaic_off_from
            perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            batches = [perm[i * cfg.batch_size:(i + 1) * cfg.batch_size] for i in range(nb)]
            args = [(train_items, idx, cfg.seed, epoch, bi, use_mosaic, cfg.hflip_prob) for bi, idx in enumerate(batches)]
            if pool is not None:
                batch_iter = pool.map(lambda a: _make_batch(*a), args)
            else:
                batch_iter = (_make_batch(*a) for a in args)
            model.train()
            sums = np.zeros(3)
            t0 = time.perf_counter()
            for bi, (x, gts) in enumerate(batch_iter):
                ta = assign_targets(gts, mcfg.num_classes, mcfg.input_size, mcfg.strides)
                total, parts = detection_loss(model(x), ta)
                if not torch.isfinite(total):
                    raise TrainingError(f"non-finite loss {total.item()} at epoch {epoch + 1}, batch {bi}")
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
                sums += (total.item(), parts["cls"].item(), parts["box"].item())
            sums /= nb
            report = evaluate_model(model, val_items, cfg.eval_conf, cfg.eval_nms_iou, cfg.report_conf) if val_items else None
            row = {
                "epoch": epoch + 1,
                "lr": lr,
                "loss_total": float(sums[0]),
                "loss_cls": float(sums[1]),
                "loss_box": float(sums[2]),
                "val_map50": report.map50 if report else float("nan"),
                "val_map5095": report.map50_95 if report else float("nan"),
            }
            history.append(row)
            log.info(
                "epoch %d/%d lr %.5f loss %.4f (cls %.4f box %.4f) mAP50 %.4f mAP50-95 %.4f [%.1fs]",
                row["epoch"], cfg.epochs, lr, row["loss_total"], row["loss_cls"], row["loss_box"],
                row["val_map50"], row["val_map5095"], time.perf_counter() - t0,
            )
            if progress:
                progress(row)
            if out_dir:
                write_metrics_csv(out_dir / "metrics.csv", history)
                extra = {"epoch": epoch + 1, "train_config": cfg.to_dict(), "val_map50": row["val_map50"]}
                save_checkpoint(out_dir / "last.pt", model, extra)
                score = row["val_map50"] if report else -row["loss_total"]
                if score > best:
                    best = score
                    save_checkpoint(out_dir / "best.pt", model, extra)
    finally:
        if pool is not None:
            pool.shutdown()
    return history


def write_metrics_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
