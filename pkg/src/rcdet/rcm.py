"""Rectangular calibration block.

Row and column means form a coarse rectangular context map, strip convolutions
reshape it into a (0, 1) gate, the gate multiplies a depthwise-filtered copy of
the input, and a norm + pointwise MLP refines the result on top of a residual.
"""
import torch
import torch.nn as nn

from .cafm import ConfigError


def axial_context(x):
    """Per-row mean plus per-column mean, each broadcast back to [B, C, H, W]."""
    if x.dim() != 4 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ValueError(f"expected a non-empty [B, C, H, W] map, got {tuple(x.shape)}")
    return x.mean(dim=3, keepdim=True) + x.mean(dim=2, keepdim=True)


class RCM(nn.Module):
    def __init__(self, channels, k=11, mlp_ratio=2):
        super().__init__()
        if k < 1 or k % 2 == 0:
            raise ConfigError(f"strip kernel length must be odd and positive, got k={k}")
        self.channels = channels
        self.k = k
        c = channels
        self.strip_h = nn.Conv2d(c, c, (1, k), padding=(0, k // 2), groups=c)
        self.norm_act = nn.Sequential(nn.BatchNorm2d(c), nn.ReLU())
        self.strip_v = nn.Conv2d(c, c, (k, 1), padding=(k // 2, 0), groups=c)
        self.dw3 = nn.Conv2d(c, c, 3, padding=1, groups=c)
        hidden = c * mlp_ratio
        self.mlp = nn.Sequential(
            nn.BatchNorm2d(c),
            nn.Conv2d(c, hidden, 1),
            nn.ReLU(),
            nn.Conv2d(hidden, c, 1),
        )

    def shape_calibration(self, ybar):
        return torch.sigmoid(self.strip_v(self.norm_act(self.strip_h(ybar))))

    def fuse_local_global(self, x, y):
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
        return self.dw3(x) * y

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected [B, {self.channels}, H, W], got {tuple(x.shape)}")
        gate = self.shape_calibration(axial_context(x))
        return self.mlp(self.fuse_local_global(x, gate)) + x
