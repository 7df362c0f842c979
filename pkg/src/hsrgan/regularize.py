"""Lazy generator/discriminator regularizers: path-length penalty and R1.

Both are applied only every `interval` steps; off-interval steps contribute
exactly zero and leave the running state untouched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass
class PLRConfig:
    weight: float = 2.0
    decay: float = 0.99
    interval: int = 4

    def __post_init__(self):
        if self.weight < 0 or not 0.0 <= self.decay <= 1.0 or self.interval < 1:
            raise ConfigError("invalid path-length regularizer config")


@dataclass(frozen=True)
class R1Config:
    gamma: float = 1.0
    interval: int = 16

    def __post_init__(self):
        if self.gamma < 0 or self.interval < 1:
            raise ConfigError("invalid R1 config")


def path_length_penalty(w_batch: torch.Tensor, synthesize_fn, running_avg: float,
                        decay: float, noise_rng: torch.Generator):
    """Pull per-sample latent-to-image stretch toward its running average.

    The stretch is the norm of the Jacobian-transpose applied to unit-variance
    image-shaped noise scaled by 1/resolution, obtained as the gradient of
    sum(image * noise) with respect to w. Returns
    (penalty tensor, updated running average, per-sample lengths); the penalty
    is measured against the average *before* the update.

    On a non-finite gradient the step is skipped: penalty None is returned and
    the average is unchanged.
    """
    images = synthesize_fn(w_batch)
    resolution = images.shape[-1]
    noise = torch.randn(images.shape, generator=noise_rng, dtype=images.dtype) / resolution
    grads = torch.autograd.grad(
        outputs=(images * noise).sum(), inputs=w_batch, create_graph=True)[0]
    lengths = grads.pow(2).sum(dim=tuple(range(1, grads.dim()))).sqrt()
    if not torch.isfinite(lengths).all():
        log.warning("non-finite path length; skipping penalty step")
        return None, running_avg, lengths.detach()
    penalty = (lengths - running_avg).pow(2).mean()
    batch_mean = float(lengths.detach().mean())
    new_avg = decay * running_avg + (1.0 - decay) * batch_mean
    return penalty, new_avg, lengths.detach()


def r1_penalty(real_images: torch.Tensor, discriminate_fn, gamma: float):
    """(gamma / 2) * mean squared gradient norm of the critic at real images.

    Returns None if the gradient is non-finite (step skipped with a warning).
    """
    real_images = real_images.detach().requires_grad_(True)
    logits = discriminate_fn(real_images)
    grads = torch.autograd.grad(outputs=logits.sum(), inputs=real_images, create_graph=True)[0]
    sq_norms = grads.pow(2).sum(dim=tuple(range(1, grads.dim())))
    if not torch.isfinite(sq_norms).all():
        log.warning("non-finite R1 gradient; skipping penalty step")
        return None
    return 0.5 * gamma * sq_norms.mean()
