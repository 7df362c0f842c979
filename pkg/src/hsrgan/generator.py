"""Style-based generator: mapping network, modulated synthesis, feature taps.

The synthesis network follows the modulated-convolution convention: a learned
4x4 constant, then one (nearest-upsample, 3x3 modulated conv, leaky-ReLU)
block per doubling of resolution, and a final unmodulated 1x1 conv to RGB.
Each block consumes one style vector, so a full style is a (num_blocks, Dw)
array; passing a single w broadcasts it to every block.

Intermediate block outputs at the configured tap resolutions can be returned
alongside the image. Taps are observers: requesting them never changes the
image.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ConfigError
from .layers import EqualizedConv2d, ModulatedConv2d, EqualizedLinear, leaky


def default_tap_resolutions(resolution: int) -> tuple[int, ...]:
    """Tap block outputs at {8, 16, 32, 64}, capped at half the image size."""
    return tuple(r for r in (8, 16, 32, 64) if r <= resolution // 2)


@dataclass(frozen=True)
class SynthesisConfig:
    resolution: int = 32
    base_channels: int = 32
    channel_max: int = 256
    tap_resolutions: tuple[int, ...] = ()  # empty -> default_tap_resolutions
    mapping_depth: int = 4
    z_dim: int = 64
    w_dim: int = 64
    noise_injection: bool = False
    truncation_mean_samples: int = 10000

    def __post_init__(self):
        r = self.resolution
        if r < 8 or (r & (r - 1)) != 0:
            raise ConfigError(f"resolution must be a power of 2 >= 8, got {r}")
        if self.mapping_depth == 0 and self.z_dim != self.w_dim:
            raise ConfigError("mapping_depth 0 requires z_dim == w_dim")
        taps = self.tap_resolutions or default_tap_resolutions(r)
        for t in taps:
            if t > r // 2 or t < 4:
                raise ConfigError(f"tap resolution {t} outside (4, {r // 2}]")
        object.__setattr__(self, "tap_resolutions", tuple(sorted(taps)))

    def channels(self, r: int) -> int:
        return min(self.channel_max, self.base_channels * (self.resolution // r))

    @property
    def block_resolutions(self) -> tuple[int, ...]:
        res = []
        r = 4
        while r <= self.resolution:
            res.append(r)
            r *= 2
        return tuple(res)

    @property
    def num_blocks(self) -> int:
        return len(self.block_resolutions)


@contextlib.contextmanager
def seeded_init(seed):
    """Fork the global RNG so module construction is reproducible."""
    if seed is None:
        yield
    else:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            yield


def check_finite(name, x):
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")


class MappingNetwork(nn.Module):
    """z -> w through `depth` equalized linear layers (identity at depth 0)."""

    def __init__(self, z_dim, w_dim, depth):
        super().__init__()
        layers = []
        for i in range(depth):
            layers.append(EqualizedLinear(z_dim if i == 0 else w_dim, w_dim, lr_mul=0.01))
        self.layers = nn.ModuleList(layers)

    def forward(self, z):
        w = z
        for layer in self.layers:
            w = leaky(layer(w))
        return w


class SynthesisBlock(nn.Module):
    def __init__(self, in_channels, out_channels, w_dim, resolution, noise: bool):
        super().__init__()
        self.resolution = resolution
        self.conv = ModulatedConv2d(in_channels, out_channels, w_dim, kernel_size=3)
        self.use_noise = noise
        if noise:
            self.register_buffer("noise_const", torch.randn(1, 1, resolution, resolution))
            self.noise_scale = nn.Parameter(torch.zeros(()))

    def forward(self, x, w, noise_mode="frozen"):
        if self.resolution > x.shape[-1]:
            x = torch.nn.functional.interpolate(x, scale_factor=2, mode="nearest")
        x = self.conv(x, w)
        if self.use_noise:
            if noise_mode == "random":
                noise = torch.randn(x.shape[0], 1, self.resolution, self.resolution,
                                    device=x.device, dtype=x.dtype)
            else:
                noise = self.noise_const
            x = x + self.noise_scale * noise
        return leaky(x)


class SynthesisNetwork(nn.Module):
    def __init__(self, cfg: SynthesisConfig):
        super().__init__()
        self.cfg = cfg
        ch4 = cfg.channels(4)
        self.const = nn.Parameter(torch.randn(1, ch4, 4, 4))
        blocks = []
        in_ch = ch4
        for r in cfg.block_resolutions:
            out_ch = cfg.channels(r)
            blocks.append(SynthesisBlock(in_ch, out_ch, cfg.w_dim, r, cfg.noise_injection))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = EqualizedConv2d(in_ch, 3, kernel_size=1)

    def forward(self, wplus, want_taps=False, noise_mode="frozen"):
        taps = {}
        x = self.const.expand(wplus.shape[0], -1, -1, -1).to(wplus.dtype)
        for i, block in enumerate(self.blocks):
            x = block(x, wplus[:, i], noise_mode=noise_mode)
            if want_taps and block.resolution in self.cfg.tap_resolutions:
                taps[block.resolution] = x
        image = self.to_rgb(x)
        if want_taps:
            return image, taps
        return image


class Generator(nn.Module):
    """Mapping + synthesis with style broadcast, truncation, and tap access."""

    def __init__(self, cfg: SynthesisConfig, seed=None):
        super().__init__()
        self.cfg = cfg
        with seeded_init(seed):
            self.mapping = MappingNetwork(cfg.z_dim, cfg.w_dim, cfg.mapping_depth)
            self.synthesis = SynthesisNetwork(cfg)

    @property
    def num_ws(self) -> int:
        return self.cfg.num_blocks

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        check_finite("z", z)
        return self.mapping(z)

    def broadcast_style(self, style: torch.Tensor) -> torch.Tensor:
        """(B, Dw) -> (B, L, Dw); a (B, L, Dw) input is validated and passed through."""
        if style.dim() == 2:
            return style[:, None, :].expand(-1, self.num_ws, -1)
        if style.dim() == 3:
            if style.shape[1] != self.num_ws:
                raise ValueError(
                    f"extended style has {style.shape[1]} blocks, synthesis has {self.num_ws}")
            return style
        raise ValueError(f"style must be (B, Dw) or (B, L, Dw), got shape {tuple(style.shape)}")

    def synthesize(self, style: torch.Tensor, want_taps: bool = False, noise_mode="frozen"):
        check_finite("style", style)
        wplus = self.broadcast_style(style)
        return self.synthesis(wplus, want_taps=want_taps, noise_mode=noise_mode)

    def forward(self, z: torch.Tensor, want_taps: bool = False):
        return self.synthesize(self.map_latent(z), want_taps=want_taps)

    def mean_style(self, sample_count=None, seed=0, batch_size=1024) -> torch.Tensor:
        """Mean of map_latent over standard-normal draws (for truncation)."""
        n = sample_count or self.cfg.truncation_mean_samples
        g = torch.Generator().manual_seed(seed)
        total = torch.zeros(self.cfg.w_dim, dtype=torch.float64)
        with torch.no_grad():
            remaining = n
            while remaining > 0:
                b = min(batch_size, remaining)
                z = torch.randn(b, self.cfg.z_dim, generator=g)
                total += self.map_latent(z.to(next(self.parameters()).dtype)).double().sum(dim=0)
                remaining -= b
        return (total / n).to(next(self.parameters()).dtype)


def truncate(w: torch.Tensor, psi: float, w_mean: torch.Tensor) -> torch.Tensor:
    """Contract styles toward the mean: w_mean + psi * (w - w_mean).

    The endpoints are exact: psi=1 returns w itself, psi=0 the mean.
    """
    if not 0.0 <= psi <= 1.0:
        raise ValueError(f"truncation psi must be in [0, 1], got {psi}")
    if psi == 1.0:
        return w
    if psi == 0.0:
        return w_mean.expand_as(w).clone()
    return w_mean + psi * (w - w_mean)


def images_to_uint8(images: torch.Tensor) -> torch.Tensor:
    """Clamp [-1, 1] synthesis output and convert to uint8 HWC at export time."""
    x = images.detach().clamp(-1.0, 1.0)
    x = (x + 1.0) * 127.5
    return x.round().to(torch.uint8).permute(0, 2, 3, 1)
