"""Shared network building blocks (equalized-lr layers, modulated conv)."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

LEAKY_SLOPE = 0.2
ACT_GAIN = math.sqrt(2.0)  # keeps activation magnitude roughly unit under leaky-ReLU


def leaky(x):
    return F.leaky_relu(x, LEAKY_SLOPE) * ACT_GAIN


class EqualizedLinear(nn.Module):
    """Linear layer with runtime weight scaling (equalized learning rate)."""

    def __init__(self, in_features, out_features, bias_init=0.0, lr_mul=1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_features,), float(bias_init)))
        self.scale = lr_mul / math.sqrt(in_features)
        self.lr_mul = lr_mul

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias * self.lr_mul)


class EqualizedConv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.scale = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        self.stride = stride
        self.padding = kernel_size // 2

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias, stride=self.stride, padding=self.padding)


class ModulatedConv2d(nn.Module):
    """3x3 (or 1x1) convolution with per-sample style modulation + demodulation."""

    def __init__(self, in_channels, out_channels, style_dim, kernel_size=3, demodulate=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.style = EqualizedLinear(style_dim, in_channels, bias_init=1.0)
        self.scale = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        self.padding = kernel_size // 2
        self.demodulate = demodulate
        self.out_channels = out_channels

    def forward(self, x, w):
        s = self.style(w)  # (B, in)
        weight = self.weight * self.scale  # (out, in, k, k)
        # scale inputs instead of building per-sample kernels: conv is linear
        # in the weights, so conv(x * s, W) == conv(x, W * s), without the
        # grouped-conv detour
        out = F.conv2d(x * s[:, :, None, None], weight, padding=self.padding)
        if self.demodulate:
            w_sq = weight.pow(2).sum(dim=(2, 3))  # (out, in)
            d = torch.rsqrt(s.pow(2) @ w_sq.t() + 1e-8)  # (B, out)
            out = out * d[:, :, None, None]
        return out + self.bias[None, :, None, None]


class MinibatchStddev(nn.Module):
    """Appends one channel holding the mean over-feature batch stddev."""

    def forward(self, x):
        if x.shape[0] > 1:
            std = x.std(dim=0, unbiased=False).mean()
        else:
            std = x.new_zeros(())
        feat = std.expand(x.shape[0], 1, x.shape[2], x.shape[3])
        return torch.cat([x, feat], dim=1)
