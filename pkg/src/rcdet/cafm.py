"""Convolution-and-attention fusion block.

A local branch (pointwise conv, channel shuffle, depthwise 3x3) and a global
branch (channel-wise "transposed" attention over a C x C map) are summed.
"""
import torch
import torch.nn as nn


class ConfigError(ValueError):
    pass


def channel_shuffle(x, groups):
    b, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ConfigError(f"channel count C={c} is not divisible by groups={groups}")
    return x.reshape(b, groups, c // groups, h, w).transpose(1, 2).reshape(b, c, h, w)


def attention_matrix(q, k, alpha):
    """Column-stochastic C x C attention map softmax(K^T Q / alpha).

    q, k: [B, C, H, W]. Column j holds the mixing weights of output channel j.
    """
    alpha = torch.as_tensor(alpha, dtype=q.dtype)
    if not bool((alpha > 0).all()):
        raise ValueError(f"alpha must be positive, got {alpha.detach().flatten().tolist()}")
    b, c = q.shape[:2]
    qf = q.reshape(b, c, -1)  # [B, C, HW] == Q^T of the [B, HW, C] layout
    kf = k.reshape(b, c, -1)
    logits = torch.bmm(kf, qf.transpose(1, 2)) / alpha  # [B, C, C], (K^T Q)[i, j]
    if not bool(torch.isfinite(logits).all()):
        raise FloatingPointError("non-finite attention logits")
    return torch.softmax(logits, dim=1)


def channel_attention(q, k, v, alpha):
    """V . softmax(K^T Q / alpha), with every output channel a convex mix of value channels."""
    if not (q.shape == k.shape == v.shape):
        raise ValueError(f"q/k/v shapes differ: {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")
    b, c, h, w = v.shape
    attn = attention_matrix(q, k, alpha)
    out = torch.bmm(v.reshape(b, c, -1).transpose(1, 2), attn)  # [B, HW, C]
    return out.transpose(1, 2).reshape(b, c, h, w)


class ChannelAttention(nn.Module):
    """Holds the learnable temperature; kept separate so cost accounting can hook it."""

    def __init__(self, alpha=1.0):
        super().__init__()
        self.alpha = nn.Parameter(torch.tensor(float(alpha)))

    def forward(self, q, k, v):
        return channel_attention(q, k, v, self.alpha)


def _dw3(c):
    return nn.Conv2d(c, c, 3, padding=1, groups=c)


class CAFM(nn.Module):
    """Shape-preserving fusion of a local conv branch and a channel-attention branch."""

    def __init__(self, channels, groups=4, alpha=1.0):
        super().__init__()
        if channels % groups:
            raise ConfigError(f"channel count C={channels} is not divisible by groups={groups}")
        self.channels = channels
        self.groups = groups
        # local branch
        self.pw_in = nn.Conv2d(channels, channels, 1)
        self.dw = _dw3(channels)
        # global branch
        self.q = nn.Sequential(nn.Conv2d(channels, channels, 1), _dw3(channels))
        self.k = nn.Sequential(nn.Conv2d(channels, channels, 1), _dw3(channels))
        self.v = nn.Sequential(nn.Conv2d(channels, channels, 1), _dw3(channels))
        self.attn = ChannelAttention(alpha)
        self.pw_out = nn.Conv2d(channels, channels, 1)

    def _check(self, y):
        if y.dim() != 4 or y.shape[1] != self.channels:
            raise ValueError(f"expected [B, {self.channels}, H, W], got {tuple(y.shape)}")

    def local(self, y):
        self._check(y)
        return self.dw(channel_shuffle(self.pw_in(y), self.groups))

    def global_(self, y):
        self._check(y)
        a = self.attn(self.q(y), self.k(y), self.v(y))
        # residual enters before the output projection
        return self.pw_out(a + y)

    def forward(self, y):
        f_conv = self.local(y)
        f_attn = self.global_(y)
        if f_conv.shape != f_attn.shape:
            raise RuntimeError(f"branch shapes differ: {tuple(f_conv.shape)} vs {tuple(f_attn.shape)}")
        return f_conv + f_attn
