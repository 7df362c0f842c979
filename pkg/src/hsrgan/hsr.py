"""Hierarchical feature alignment: frozen extractor, predictor heads, loss.

A frozen feature extractor maps an image to a stack of progressively deeper
feature maps. Small trainable predictor heads sit on the generator's
intermediate taps and are asked to reproduce the extractor's features for the
very image the generator just produced. Pairing is semantic: the deepest
extractor stage supervises the lowest-resolution generator tap. Both sides
are resampled to a common g x g grid before the squared error.

The extractor never trains here. By default the target branch is taken under
stop-gradient, so the only path from the alignment loss into the generator
runs through the predictor heads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ExtractorTrainingError
from .generator import SynthesisConfig, seeded_init

TAP_GROUPS = ("all", "high", "mid", "low", "none")
EXTRACTOR_KINDS = ("trained", "random-init", "external-plugin")
EXTRACTOR_WIDTHS = (24, 48, 96, 192)


def default_grid(resolution: int) -> int:
    """Common feature grid: 7 for 32px images, 14 for 64px."""
    return max(4, (7 * resolution) // 32)


@dataclass(frozen=True)
class HSRConfig:
    weight: float = 1.0
    warmup_kimg: float = 25.0
    stop_gradient: bool = True
    tap_groups: str = "all"
    extractor_kind: str = "trained"
    predictor_hidden: int = 256
    grid: int = 0  # 0 -> default_grid(resolution)

    def __post_init__(self):
        if self.warmup_kimg < 0:
            raise ConfigError("warmup_kimg must be >= 0")
        if self.weight < 0:
            raise ConfigError("hsr weight must be >= 0")
        if self.tap_groups not in TAP_GROUPS:
            raise ConfigError(f"tap_groups must be one of {TAP_GROUPS}")
        if self.extractor_kind not in EXTRACTOR_KINDS:
            raise ConfigError(f"extractor_kind must be one of {EXTRACTOR_KINDS}")


class ConvFactorNet(nn.Module):
    """4-stage conv regressor from images in [-1, 1] to factor vectors.

    Stage outputs double as the hierarchical feature stack; the factor head
    pools the deepest stage.
    """

    def __init__(self, input_resolution: int, widths=EXTRACTOR_WIDTHS, out_dim: int = 6):
        super().__init__()
        self.input_resolution = input_resolution
        self.widths = tuple(widths)
        self.out_dim = out_dim
        stages = []
        in_ch = 3
        for i, ch in enumerate(self.widths):
            stages.append(nn.Sequential(
                nn.Conv2d(in_ch, ch, 3, stride=(1 if i == 0 else 2), padding=1),
                nn.LeakyReLU(0.2),
                nn.Conv2d(ch, ch, 3, padding=1),
                nn.LeakyReLU(0.2),
            ))
            in_ch = ch
        self.stages = nn.ModuleList(stages)
        self.head = nn.Linear(self.widths[-1], out_dim)

    def stage_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        deepest = self.stage_features(x)[-1]
        return self.head(deepest.mean(dim=(2, 3)))


def fit_factor_regressor(net: ConvFactorNet, images_float01: np.ndarray, factors: np.ndarray, *,
                         val_count: int = 1000, batch_size: int = 64, lr: float = 2e-3,
                         max_epochs: int = 60, target_mse: float = 0.02, seed: int = 0,
                         log_fn=None) -> dict:
    """Train a factor regressor until held-out per-factor MSE < target_mse.

    Returns the training record (achieved MSEs, epochs). Raises
    ExtractorTrainingError naming the achieved MSEs if the bar is not met
    within max_epochs.
    """
    n = images_float01.shape[0]
    if n <= val_count:
        raise ConfigError(f"need more than {val_count} samples, got {n}")
    images = torch.from_numpy(images_float01.astype(np.float32)).permute(0, 3, 1, 2) * 2.0 - 1.0
    targets = torch.from_numpy(factors.astype(np.float32))
    train_x, val_x = images[:-val_count], images[-val_count:]
    train_y, val_y = targets[:-val_count], targets[-val_count:]

    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    best = None
    for epoch in range(max_epochs):
        net.train()
        order = torch.randperm(train_x.shape[0], generator=g)
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            opt.zero_grad(set_to_none=True)
            loss = F.mse_loss(net(train_x[idx]), train_y[idx])
            loss.backward()
            opt.step()
        net.eval()
        with torch.no_grad():
            preds = torch.cat([net(val_x[i : i + 256]) for i in range(0, len(val_x), 256)])
            per_factor = ((preds - val_y) ** 2).mean(dim=0)
        mse = per_factor.numpy().astype(float)
        if log_fn:
            log_fn(f"epoch {epoch}: val mse per factor {np.round(mse, 4).tolist()}")
        if best is None or mse.max() < best["max_mse"]:
            best = {"epoch": epoch, "max_mse": float(mse.max()), "per_factor_mse": mse.tolist()}
        if (mse < target_mse).all():
            return {"epochs": epoch + 1, "per_factor_mse": mse.tolist(), "target_mse": target_mse}
    raise ExtractorTrainingError(
        f"validation MSE bar {target_mse} not reached within {max_epochs} epochs; "
        f"best per-factor MSE {np.round(np.array(best['per_factor_mse']), 4).tolist()} "
        f"at epoch {best['epoch']}")


class FrozenExtractor:
    """Immutable feature stack provider with a declared manifest."""

    def __init__(self, net: ConvFactorNet, manifest: dict):
        net = net.eval().requires_grad_(False)
        self.net = net
        self.manifest = dict(manifest)
        self.stage_channels = list(net.widths)
        self.input_resolution = net.input_resolution

    def stages(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Feature maps per stage for images in [-1, 1] (resized if needed)."""
        if images.shape[-1] != self.input_resolution:
            images = F.interpolate(images, size=(self.input_resolution,) * 2,
                                   mode="bilinear", align_corners=False)
        return self.net.stage_features(images)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        """Pooled deepest-stage features; the local perceptual embedding."""
        return self.stages(images)[-1].mean(dim=(2, 3))

    @property
    def embed_dim(self) -> int:
        return self.stage_channels[-1]

    def predict_factors(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[-1] != self.input_resolution:
            images = F.interpolate(images, size=(self.input_resolution,) * 2,
                                   mode="bilinear", align_corners=False)
        return self.net(images)


class ExternalExtractor:
    """Plugin wrapper around a user feature function with a declared manifest.

    The manifest must declare `stage_channels` (list) and `input_resolution`;
    the function maps a (B, 3, R, R) tensor in [-1, 1] to a list of feature
    maps, one per declared stage.
    """

    def __init__(self, feature_fn, manifest: dict):
        for key in ("stage_channels", "input_resolution"):
            if key not in manifest:
                raise ConfigError(f"plugin manifest missing {key!r}")
        self.feature_fn = feature_fn
        self.manifest = dict(manifest)
        self.stage_channels = list(manifest["stage_channels"])
        self.input_resolution = int(manifest["input_resolution"])
        probe = torch.zeros(1, 3, self.input_resolution, self.input_resolution)
        feats = feature_fn(probe)
        if len(feats) != len(self.stage_channels):
            raise ConfigError(
                f"plugin returned {len(feats)} stages, manifest declares {len(self.stage_channels)}")
        for i, (feat, ch) in enumerate(zip(feats, self.stage_channels)):
            if feat.shape[1] != ch:
                raise ConfigError(
                    f"plugin stage {i} has {feat.shape[1]} channels, manifest declares {ch}")

    def stages(self, images: torch.Tensor) -> list[torch.Tensor]:
        if images.shape[-1] != self.input_resolution:
            images = F.interpolate(images, size=(self.input_resolution,) * 2,
                                   mode="bilinear", align_corners=False)
        return list(self.feature_fn(images))

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        return self.stages(images)[-1].mean(dim=(2, 3))

    @property
    def embed_dim(self) -> int:
        return self.stage_channels[-1]


def build_extractor(kind: str, *, archive=None, input_resolution: int = 32,
                    widths=EXTRACTOR_WIDTHS, seed: int = 0, feature_fn=None,
                    manifest: dict | None = None, fit_kwargs: dict | None = None):
    """Construct a frozen extractor of the requested kind."""
    if kind == "external-plugin":
        if feature_fn is None or manifest is None:
            raise ConfigError("external-plugin requires feature_fn and manifest")
        return ExternalExtractor(feature_fn, manifest)
    with seeded_init(seed):
        net = ConvFactorNet(input_resolution, widths=widths)
    if kind == "random-init":
        return FrozenExtractor(net, {"kind": kind, "seed": seed, "widths": list(widths),
                                     "input_resolution": input_resolution})
    if kind == "trained":
        if archive is None:
            raise ConfigError("trained extractor requires a dataset archive")
        record = fit_factor_regressor(net, archive.images_float(), archive.factors,
                                      seed=seed, **(fit_kwargs or {}))
        return FrozenExtractor(net, {"kind": kind, "seed": seed, "widths": list(widths),
                                     "input_resolution": input_resolution, **record})
    raise ConfigError(f"unknown extractor kind {kind!r}")


def save_extractor(extractor: FrozenExtractor, path) -> Path:
    if not isinstance(extractor, FrozenExtractor):
        raise ConfigError("only locally built extractors can be serialized")
    from .checkpoint import save_container
    arrays = {f"net.{k}": v.detach().numpy().astype(np.float32)
              for k, v in extractor.net.state_dict().items()}
    return save_container(path, arrays, {"manifest": extractor.manifest})


def load_extractor(path) -> FrozenExtractor:
    from .checkpoint import load_container
    arrays, meta = load_container(path)
    manifest = meta["manifest"]
    net = ConvFactorNet(manifest["input_resolution"], widths=tuple(manifest["widths"]))
    with torch.no_grad():
        for name, tensor in net.state_dict().items():
            tensor.copy_(torch.from_numpy(arrays[f"net.{name}"]).reshape(tensor.shape))
    return FrozenExtractor(net, manifest)


class PredictorHead(nn.Module):
    """Conv1x1 -> leaky-ReLU -> Conv1x1, spatially size-preserving."""

    def __init__(self, in_channels, hidden, out_channels):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, hidden, 1)
        self.conv2 = nn.Conv2d(hidden, out_channels, 1)

    def forward(self, x):
        return self.conv2(F.leaky_relu(self.conv1(x), 0.2))


def group_pair_indices(n_pairs: int, group: str) -> tuple[int, ...]:
    """Which tap pairs are active for a semantic-level group.

    Pair 0 is the lowest-resolution tap (highest-level semantics). Groups are
    overlapping windows of two pairs, like the high/mid/low split of a
    four-tap stack; with only two pairs the windows coincide.
    """
    if group == "none":
        return ()
    if group == "all":
        return tuple(range(n_pairs))
    size = min(2, n_pairs)
    starts = {"high": 0, "mid": max(0, (n_pairs - 1) // 2), "low": max(0, n_pairs - size)}
    start = starts[group]
    return tuple(range(start, min(n_pairs, start + size)))


class HsrRegularizer:
    """Predictor heads plus the feature-alignment loss over tap pairs."""

    def __init__(self, gen_cfg: SynthesisConfig, extractor, cfg: HSRConfig, seed=None):
        self.cfg = cfg
        self.extractor = extractor
        self.grid = cfg.grid or default_grid(gen_cfg.resolution)
        taps = gen_cfg.tap_resolutions
        n_stages = len(extractor.stage_channels)
        if len(taps) > n_stages:
            raise ConfigError(f"{len(taps)} taps but extractor has only {n_stages} stages")
        # deepest extractor stage pairs with the lowest-resolution tap
        self.pairs = [(tap, n_stages - 1 - i) for i, tap in enumerate(taps)]
        self.active_indices = group_pair_indices(len(self.pairs), cfg.tap_groups)
        with seeded_init(seed):
            self.heads = nn.ModuleList([
                PredictorHead(gen_cfg.channels(tap), cfg.predictor_hidden,
                              extractor.stage_channels[stage])
                for tap, stage in self.pairs
            ])

    def active(self, kimg: float) -> bool:
        return kimg >= self.cfg.warmup_kimg and len(self.active_indices) > 0

    def parameters(self):
        return self.heads.parameters()

    def loss(self, gen_taps: dict, images: torch.Tensor, kimg: float) -> torch.Tensor:
        """Mean over active pairs of per-element squared prediction error."""
        if not self.active(kimg):
            return images.new_zeros(())
        if self.cfg.stop_gradient:
            with torch.no_grad():
                stage_feats = self.extractor.stages(images.detach())
        else:
            stage_feats = self.extractor.stages(images)
        losses = []
        for idx in self.active_indices:
            tap_res, stage = self.pairs[idx]
            pred_in = F.interpolate(gen_taps[tap_res], size=(self.grid,) * 2,
                                    mode="bilinear", align_corners=False)
            pred = self.heads[idx](pred_in)
            target = F.interpolate(stage_feats[stage], size=(self.grid,) * 2,
                                   mode="bilinear", align_corners=False)
            losses.append(F.mse_loss(pred, target))
        return torch.stack(losses).mean()
