"""Small three-scale anchor-free detector hosting the CAFM and RCM blocks.

Layout: stem -> 4 stride-2 stages -> C2PSA (with or without CAFM) at the
backbone tail -> top-down + bottom-up fusion neck -> per-scale head entry ->
decoupled class / box convolutions at strides 8, 16 and 32.
"""
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import batched_nms
from .cafm import CAFM, ChannelAttention, ConfigError
from .rcm import RCM

CLASS_NAMES = ("normal_face", "profile_face", "mobile_phone")

# (use_cafm, use_rcm) for each ablation variant
VARIANTS = {
    "base": (False, False),
    "rcm": (False, True),
    "cafm": (True, False),
    "cr": (True, True),
}

BASE_WIDTHS = (16, 32, 64, 128)
OFFSET_GAIN = 2.0  # center offset = OFFSET_GAIN * sigmoid(t) - 0.5 cells
SIZE_GAIN = 3.0  # side = (SIZE_GAIN * sigmoid(t))**2 strides


@dataclass
class ModelConfig:
    num_classes: int = 3
    width_mult: float = 0.5
    depth_mult: float = 0.5
    use_cafm: bool = True
    use_rcm: bool = True
    shuffle_groups: int = 4
    strip_k: int = 11
    input_size: int = 160
    strides: tuple = (8, 16, 32)
    c2psa_blocks: int = 1

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.input_size % 32:
            raise ConfigError(f"input_size must be divisible by 32, got {self.input_size}")
        if self.strides != (8, 16, 32):
            raise ConfigError(f"strides must be (8, 16, 32), got {self.strides}")

    @classmethod
    def for_variant(cls, variant, **kw):
        try:
            use_cafm, use_rcm = VARIANTS[variant]
        except KeyError:
            raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}") from None
        return cls(use_cafm=use_cafm, use_rcm=use_rcm, **kw)

    @property
    def variant(self):
        for name, flags in VARIANTS.items():
            if flags == (self.use_cafm, self.use_rcm):
                return name

    def widths(self):
        out = []
        for base in BASE_WIDTHS:
            w = base * self.width_mult
            if abs(w - round(w)) > 1e-9 or round(w) < 2:
                raise ConfigError(f"width {base} x width_mult {self.width_mult} = {w} is not a usable integer")
            out.append(int(round(w)))
        c5 = out[-1]
        if c5 % 2:
            raise ConfigError(f"backbone tail width {c5} must be even")
        if self.use_cafm and (c5 // 2) % self.shuffle_groups:
            raise ConfigError(
                f"CAFM width {c5 // 2} is not divisible by shuffle_groups={self.shuffle_groups}"
            )
        return out

    def to_dict(self):
        d = asdict(self)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class BBox:
    """Normalized center-format box."""

    cx: float
    cy: float
    w: float
    h: float

    def xyxy(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_xyxy(cls, x1, y1, x2, y2):
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    score: float


# --------------------------------------------------------------------------
# building blocks


class Conv(nn.Module):
    """Conv2d -> BatchNorm -> SiLU."""

    def __init__(self, c_in, c_out, k=1, s=1, act=True):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, k, s, k // 2, bias=False)
        self.bn = nn.BatchNorm2d(c_out)
        self.act = nn.SiLU() if act else nn.Identity()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class ResBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.cv1 = Conv(c, c, 1)
        self.cv2 = Conv(c, c, 3)

    def forward(self, x):
        return x + self.cv2(self.cv1(x))


class Stage(nn.Sequential):
    def __init__(self, c_in, c_out, n):
        super().__init__(Conv(c_in, c_out, 3, 2), *[ResBlock(c_out) for _ in range(n)])


class PSABlock(nn.Module):
    """Residual (CAFM, feed-forward) pair; without CAFM it is a plain pointwise bottleneck."""

    def __init__(self, c, use_cafm=True, groups=4):
        super().__init__()
        self.cafm = CAFM(c, groups) if use_cafm else None
        self.ffn = nn.Sequential(Conv(c, 2 * c, 1), nn.Conv2d(2 * c, c, 1))

    def forward(self, x):
        if self.cafm is not None:
            x = x + self.cafm(x)
        return x + self.ffn(x)


class C2PSA(nn.Module):
    """1x1 conv, split in halves, run one half through PSA blocks, concat, 1x1 conv."""

    def __init__(self, c, n=1, use_cafm=True, groups=4):
        super().__init__()
        if c % 2:
            raise ConfigError(f"C2PSA needs an even channel count, got {c}")
        self.half = c // 2
        self.cv1 = Conv(c, c, 1)
        self.blocks = nn.Sequential(*[PSABlock(self.half, use_cafm, groups) for _ in range(n)])
        self.cv2 = Conv(c, c, 1)

    def forward(self, x):
        a, b = self.cv1(x).split(self.half, dim=1)
        return self.cv2(torch.cat((a, self.blocks(b)), dim=1))


class Fuse(nn.Module):
    """Post-concatenation fusion: 1x1 reduce, then a 3x3 conv or an RCM block."""

    def __init__(self, c_in, c_out, use_rcm, k):
        super().__init__()
        self.reduce = Conv(c_in, c_out, 1)
        self.mix = RCM(c_out, k) if use_rcm else Conv(c_out, c_out, 3)

    def forward(self, x):
        return self.mix(self.reduce(x))


class Head(nn.Module):
    def __init__(self, c, num_classes, use_rcm, k):
        super().__init__()
        self.entry = RCM(c, k) if use_rcm else Conv(c, c, 3)
        self.cls = nn.Sequential(Conv(c, c, 3), nn.Conv2d(c, num_classes, 1))
        self.box = nn.Sequential(Conv(c, c, 3), nn.Conv2d(c, 4, 1))

    def forward(self, x):
        x = self.entry(x)
        return torch.cat((self.cls(x), self.box(x)), dim=1)


class Detector(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        c1, c3, c4, c5 = cfg.widths()
        n = max(1, round(2 * cfg.depth_mult))
        k = cfg.strip_k
        self.stem = Conv(3, c1, 3, 2)
        self.stage1 = Stage(c1, c1, n)  # stride 4
        self.stage2 = Stage(c1, c3, n)  # stride 8
        self.stage3 = Stage(c3, c4, n)  # stride 16
        self.stage4 = Stage(c4, c5, n)  # stride 32
        self.tail = C2PSA(c5, cfg.c2psa_blocks, cfg.use_cafm, cfg.shuffle_groups)
        self.td4 = Fuse(c5 + c4, c4, cfg.use_rcm, k)
        self.td3 = Fuse(c4 + c3, c3, cfg.use_rcm, k)
        self.down3 = Conv(c3, c3, 3, 2)
        self.bu4 = Fuse(c3 + c4, c4, cfg.use_rcm, k)
        self.down4 = Conv(c4, c4, 3, 2)
        self.bu5 = Fuse(c4 + c5, c5, cfg.use_rcm, k)
        self.heads = nn.ModuleList(Head(c, cfg.num_classes, cfg.use_rcm, k) for c in (c3, c4, c5))
        self._init_bias()

    def _init_bias(self, prior=0.01):
        for head in self.heads:
            nn.init.constant_(head.cls[-1].bias, -math.log((1 - prior) / prior))
            nn.init.zeros_(head.box[-1].bias)

    def forward(self, x):
        p3 = self.stage2(self.stage1(self.stem(x)))
        p4 = self.stage3(p3)
        p5 = self.tail(self.stage4(p4))
        n4 = self.td4(torch.cat((F.interpolate(p5, scale_factor=2.0, mode="nearest"), p4), 1))
        o3 = self.td3(torch.cat((F.interpolate(n4, scale_factor=2.0, mode="nearest"), p3), 1))
        o4 = self.bu4(torch.cat((self.down3(o3), n4), 1))
        o5 = self.bu5(torch.cat((self.down4(o4), p5), 1))
        return [head(f) for head, f in zip(self.heads, (o3, o4, o5))]


def build_model(cfg):
    return Detector(cfg)


# --------------------------------------------------------------------------
# box parameterization


def cell_grid(h, w, device=None, dtype=torch.float32):
    gy, gx = torch.meshgrid(
        torch.arange(h, device=device, dtype=dtype), torch.arange(w, device=device, dtype=dtype), indexing="ij"
    )
    return gx, gy


def decode_boxes(raw_box, stride, input_size):
    """Regressors [B, 4, H, W] -> normalized (cx, cy, w, h) [B, 4, H, W], unclipped."""
    h, w = raw_box.shape[-2:]
    gx, gy = cell_grid(h, w, raw_box.device, raw_box.dtype)
    s = torch.sigmoid(raw_box)
    cx = (gx + OFFSET_GAIN * s[:, 0] - 0.5) * stride / input_size
    cy = (gy + OFFSET_GAIN * s[:, 1] - 0.5) * stride / input_size
    bw = (SIZE_GAIN * s[:, 2]) ** 2 * stride / input_size
    bh = (SIZE_GAIN * s[:, 3]) ** 2 * stride / input_size
    return torch.stack((cx, cy, bw, bh), dim=1)


def _logit(p):
    return math.log(p / (1 - p))


def encode_box(box, gx, gy, stride, input_size):
    """Inverse of ``decode_boxes`` for one cell. ``box`` is normalized (cx, cy, w, h)."""
    cx, cy, w, h = box
    ox = cx * input_size / stride - gx
    oy = cy * input_size / stride - gy
    tw = math.sqrt(w * input_size / stride) / SIZE_GAIN
    th = math.sqrt(h * input_size / stride) / SIZE_GAIN
    vals = ((ox + 0.5) / OFFSET_GAIN, (oy + 0.5) / OFFSET_GAIN, tw, th)
    if not all(0.0 < v < 1.0 for v in vals):
        raise ValueError(f"box {box} is not representable from cell ({gx}, {gy}) at stride {stride}")
    return tuple(_logit(v) for v in vals)


def decode_predictions(raw, conf_thresh=0.25, nms_iou=0.5, input_size=None, max_det=300):
    """Turn raw per-scale grids into per-image lists of ``Detection``.

    Each cell whose best class probability reaches ``conf_thresh`` emits one
    box of that class; per-class greedy NMS then removes overlaps above
    ``nms_iou``. Boxes are clipped to the unit square.
    """
    if input_size is None:
        input_size = raw[0].shape[-1] * 8
    batch = raw[0].shape[0]
    per_scale = []
    for grid, stride in zip(raw, (8, 16, 32)):
        nc = grid.shape[1] - 4
        with torch.no_grad():
            probs = torch.sigmoid(grid[:, :nc].double())
            boxes = decode_boxes(grid[:, nc:].double(), stride, input_size)
        per_scale.append((probs.flatten(2), boxes.flatten(2)))
    out = []
    for b in range(batch):
        probs = torch.cat([p[b] for p, _ in per_scale], dim=1).numpy()  # [nc, N]
        boxes = torch.cat([x[b] for _, x in per_scale], dim=1).numpy()  # [4, N]
        scores = probs.max(axis=0)
        classes = probs.argmax(axis=0)
        keep = np.flatnonzero(scores >= conf_thresh)
        if keep.size == 0:
            out.append([])
            continue
        bx = boxes[:, keep].T
        xyxy = np.clip(
            np.stack([bx[:, 0] - bx[:, 2] / 2, bx[:, 1] - bx[:, 3] / 2, bx[:, 0] + bx[:, 2] / 2, bx[:, 1] + bx[:, 3] / 2], 1),
            0.0,
            1.0,
        )
        sel = batched_nms(xyxy, scores[keep], classes[keep], nms_iou)[:max_det]
        dets = [
            Detection(BBox.from_xyxy(*map(float, xyxy[i])), int(classes[keep][i]), float(scores[keep][i]))
            for i in sel
        ]
        out.append(dets)
    return out


# --------------------------------------------------------------------------
# cost accounting


def conv_macs(conv, out_hw):
    """Multiply-accumulates of one Conv2d at output size ``out_hw`` (bias adds excluded)."""
    kh, kw = conv.kernel_size
    return (conv.in_channels // conv.groups) * kh * kw * conv.out_channels * out_hw[0] * out_hw[1]


def count_params_flops(model, input_size=None):
    """Return (learnable scalar count, GFLOPs) at batch 1, with GFLOPs = 2 * MACs / 1e9.

    MACs cover Conv2d, Linear and the two channel-attention contractions.
    """
    if input_size is None:
        input_size = getattr(getattr(model, "cfg", None), "input_size", 160)
    params = sum(p.numel() for p in model.parameters() if p.requires_grad)
    macs = [0]

    def on_conv(m, inp, out):
        macs[0] += conv_macs(m, out.shape[-2:])

    def on_linear(m, inp, out):
        macs[0] += m.in_features * m.out_features * (out.numel() // out.shape[-1])

    def on_attn(m, inp, out):
        b, c, h, w = inp[0].shape
        macs[0] += 2 * b * c * c * h * w  # K^T Q and V . A

    hooks = []
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            hooks.append(m.register_forward_hook(on_conv))
        elif isinstance(m, nn.Linear):
            hooks.append(m.register_forward_hook(on_linear))
        elif isinstance(m, ChannelAttention):
            hooks.append(m.register_forward_hook(on_attn))
    was_training = model.training
    model.eval()
    try:
        p = next(model.parameters(), None)
        dtype = p.dtype if p is not None else torch.float32
        with torch.no_grad():
            model(torch.zeros(1, 3, input_size, input_size, dtype=dtype))
    finally:
        for h in hooks:
            h.remove()
        model.train(was_training)
    return params, 2 * macs[0] / 1e9


def measure_fps(model, input_size=None, warmup=5, iters=50, seed=0):
    """Single-threaded batch-1 inference throughput in frames per second."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if input_size is None:
        input_size = model.cfg.input_size
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    was_training = model.training
    model.eval()
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(1, 3, input_size, input_size, generator=g)
    try:
        with torch.no_grad():
            for _ in range(warmup):
                model(x)
            t0 = time.perf_counter()
            for _ in range(iters):
                model(x)
            elapsed = time.perf_counter() - t0
    finally:
        torch.set_num_threads(threads)
        model.train(was_training)
    return iters / max(elapsed, 1e-12)


# --------------------------------------------------------------------------
# checkpoints

CKPT_FORMAT = "rcdet-checkpoint"
CKPT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, model, extra=None):
    """Write ``{format, version, config, config_hash, state_dict, extra}`` with torch.save."""
    cfg = model.cfg
    payload = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, cfg=None):
    """Rebuild the model stored at ``path``.

    Passing ``cfg`` asserts the checkpoint was produced with that configuration.
    """
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"{path} is not an rcdet checkpoint")
    stored = ModelConfig.from_dict(payload["config"])
    recorded = payload.get("config_hash")
    if recorded != stored.hash():
        raise CheckpointError(
            f"checkpoint config hash {recorded} does not match its stored config hash {stored.hash()}"
        )
    if cfg is not None and cfg.hash() != recorded:
        raise CheckpointError(f"config hash {cfg.hash()} does not match checkpoint config hash {recorded}")
    model = build_model(stored)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(
            f"weights do not fit config (checkpoint hash {recorded}, rebuilt hash {stored.hash()}): {exc}"
        ) from None
    model.eval()
    return model, payload.get("extra", {})
