import numpy as np
import pytest
import torch

from hsrgan.discriminator import AugmentConfig, Discriminator, augment
from hsrgan.errors import ConfigError

from conftest import TINY


def probe_images(n, res=TINY.resolution, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, 3, res, res, generator=g).clamp(-1, 1)


class TestDiscriminator:
    def test_deterministic_logits(self):
        disc = Discriminator(TINY, seed=0)
        x = probe_images(4)
        assert torch.equal(disc(x), disc(x))

    def test_batch_order_preserving(self):
        disc = Discriminator(TINY, seed=0)
        x = probe_images(5)
        logits = disc(x)
        assert logits.shape == (5,)
        perm = torch.tensor([3, 1, 4, 0, 2])
        assert torch.allclose(disc(x[perm]), logits[perm])

    def test_resolution_mismatch_rejected(self):
        disc = Discriminator(TINY, seed=0)
        with pytest.raises(ValueError):
            disc(probe_images(2, res=TINY.resolution * 2))

    def test_finite_on_valid_range(self):
        disc = Discriminator(TINY, seed=1)
        assert torch.isfinite(disc(probe_images(8, seed=3))).all()

    def test_input_gradient_matches_finite_differences(self):
        disc = Discriminator(TINY, seed=2).double()
        x = probe_images(2, seed=4).double().requires_grad_(True)
        grad, = torch.autograd.grad(disc(x).sum(), x)
        eps = 1e-5
        for idx in [(0, 0, 1, 2), (1, 2, 7, 5)]:
            dx = torch.zeros_like(x)
            dx[idx] = eps
            with torch.no_grad():
                fd = (disc(x + dx).sum() - disc(x - dx).sum()) / (2 * eps)
            assert abs(fd - grad[idx]) / abs(grad[idx]) < 1e-4


class TestAugment:
    def test_p_zero_identity(self):
        x = probe_images(4)
        out = augment(x, AugmentConfig(probability=0.0), torch.Generator().manual_seed(0))
        assert torch.equal(out, x)

    def test_flip_involution(self):
        x = probe_images(4)
        cfg = AugmentConfig(probability=1.0, flip=True, translate=False, brightness=False)
        rng = torch.Generator().manual_seed(0)
        assert torch.equal(augment(augment(x, cfg, rng), cfg, rng), x)

    def test_application_frequency(self):
        # flips are detectable on an asymmetric probe
        probe = torch.zeros(10000, 3, 8, 8)
        probe[:, :, :, 0] = 1.0
        cfg = AugmentConfig(probability=0.3, flip=True, translate=False, brightness=False)
        out = augment(probe, cfg, torch.Generator().manual_seed(7))
        freq = float((out[:, 0, 0, -1] == 1.0).float().mean())
        assert abs(freq - 0.3) < 0.02

    def test_shape_and_range_preserved(self):
        x = probe_images(8, seed=5)
        cfg = AugmentConfig(probability=1.0)
        out = augment(x, cfg, torch.Generator().manual_seed(1))
        assert out.shape == x.shape
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_differentiable_wrt_image(self):
        x = probe_images(3, seed=6).requires_grad_(True)
        cfg = AugmentConfig(probability=1.0)
        out = augment(x, cfg, torch.Generator().manual_seed(2))
        out.sum().backward()
        assert x.grad is not None
        assert torch.isfinite(x.grad).all()

    def test_invalid_probability(self):
        with pytest.raises(ConfigError):
            AugmentConfig(probability=1.5)
