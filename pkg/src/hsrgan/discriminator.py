"""Convolutional critic and fixed-probability differentiable augmentation.

The augmentation pipe stands in for an adaptive-probability controller: each
enabled op (horizontal flip, integer translate, brightness jitter) is applied
independently per sample with a fixed probability p. Every op is
differentiable almost everywhere in the image, so augmented fakes still carry
gradients back to the generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError
from .generator import SynthesisConfig, seeded_init
from .layers import EqualizedConv2d, EqualizedLinear, MinibatchStddev, leaky


@dataclass(frozen=True)
class AugmentConfig:
    probability: float = 0.3
    flip: bool = True
    translate: bool = True
    brightness: bool = True
    brightness_jitter: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError(f"augment probability {self.probability} outside [0, 1]")


def augment(images: torch.Tensor, cfg: AugmentConfig, rng: torch.Generator) -> torch.Tensor:
    """Apply each enabled op with probability p per sample; clamps to [-1, 1]."""
    b = images.shape[0]
    res = images.shape[-1]
    x = images
    device = images.device

    def mask():
        return (torch.rand(b, generator=rng, device=device) < cfg.probability)

    if cfg.flip:
        m = mask()
        if m.any():
            flipped = torch.flip(x, dims=[3])
            x = torch.where(m[:, None, None, None], flipped, x)
    if cfg.translate:
        m = mask()
        max_shift = res // 8
        shifts = torch.randint(-max_shift, max_shift + 1, (b, 2), generator=rng, device=device)
        if m.any() and max_shift > 0:
            pad = F.pad(x, (max_shift,) * 4, mode="replicate")
            rows = []
            for i in range(b):
                if m[i]:
                    dx, dy = int(shifts[i, 0]), int(shifts[i, 1])
                    rows.append(pad[i : i + 1, :, max_shift - dy : max_shift - dy + res,
                                    max_shift - dx : max_shift - dx + res])
                else:
                    rows.append(x[i : i + 1])
            x = torch.cat(rows, dim=0)
    if cfg.brightness:
        m = mask()
        delta = (torch.rand(b, generator=rng, device=device) * 2.0 - 1.0) * cfg.brightness_jitter
        x = x + (m * delta)[:, None, None, None].to(x.dtype)
        x = x.clamp(-1.0, 1.0)
    return x


class Discriminator(nn.Module):
    """Mirror of the generator: 3x3 convs, stride-2 downsampling, minibatch
    stddev before the final dense head."""

    def __init__(self, cfg: SynthesisConfig, seed=None):
        super().__init__()
        self.cfg = cfg
        with seeded_init(seed):
            self.from_rgb = EqualizedConv2d(3, cfg.channels(cfg.resolution), kernel_size=1)
            blocks = []
            for r in reversed(cfg.block_resolutions[1:]):  # resolution ... 8
                blocks.append(nn.ModuleDict({
                    "conv": EqualizedConv2d(cfg.channels(r), cfg.channels(r), kernel_size=3),
                    "down": EqualizedConv2d(cfg.channels(r), cfg.channels(r // 2), kernel_size=3, stride=2),
                }))
            self.blocks = nn.ModuleList(blocks)
            ch4 = cfg.channels(4)
            self.mbstd = MinibatchStddev()
            self.conv_out = EqualizedConv2d(ch4 + 1, ch4, kernel_size=3)
            self.dense = EqualizedLinear(ch4 * 16, ch4)
            self.logit = EqualizedLinear(ch4, 1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != 3 or images.shape[-1] != self.cfg.resolution \
                or images.shape[-2] != self.cfg.resolution:
            raise ValueError(
                f"expected (B, 3, {self.cfg.resolution}, {self.cfg.resolution}) input, "
                f"got {tuple(images.shape)}")
        x = leaky(self.from_rgb(images))
        for block in self.blocks:
            x = leaky(block["conv"](x))
            x = leaky(block["down"](x))
        x = self.mbstd(x)
        x = leaky(self.conv_out(x))
        x = leaky(self.dense(x.flatten(1)))
        return self.logit(x).squeeze(1)

    def discriminate(self, images: torch.Tensor) -> torch.Tensor:
        return self.forward(images)
