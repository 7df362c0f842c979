import numpy as np
import pytest
import torch

from hsrgan.errors import ConfigError
from hsrgan.generator import (Generator, SynthesisConfig, default_tap_resolutions,
                              images_to_uint8, truncate)

from conftest import TINY


def tiny_generator(seed=1, dtype=torch.float64):
    gen = Generator(TINY, seed=seed)
    return gen.double() if dtype == torch.float64 else gen


class TestConfig:
    def test_tap_defaults(self):
        assert default_tap_resolutions(32) == (8, 16)
        assert default_tap_resolutions(64) == (8, 16, 32)
        assert SynthesisConfig(resolution=32).tap_resolutions == (8, 16)

    def test_channel_schedule(self):
        cfg = SynthesisConfig(resolution=32, base_channels=32, channel_max=256)
        assert [cfg.channels(r) for r in (4, 8, 16, 32)] == [256, 128, 64, 32]

    def test_invalid(self):
        with pytest.raises(ConfigError):
            SynthesisConfig(resolution=24)
        with pytest.raises(ConfigError):
            SynthesisConfig(resolution=32, mapping_depth=0, z_dim=8, w_dim=16)
        with pytest.raises(ConfigError):
            SynthesisConfig(resolution=32, tap_resolutions=(32,))


class TestMapping:
    def test_deterministic(self):
        gen = Generator(SynthesisConfig(resolution=16, z_dim=8, w_dim=8,
                                        base_channels=8, channel_max=16,
                                        tap_resolutions=(8,)), seed=0)
        z = torch.randn(3, 8, generator=torch.Generator().manual_seed(1))
        assert torch.equal(gen.map_latent(z), gen.map_latent(z))

    def test_depth_zero_identity(self):
        cfg = SynthesisConfig(resolution=16, z_dim=8, w_dim=8, mapping_depth=0,
                              base_channels=8, channel_max=16, tap_resolutions=(8,))
        gen = Generator(cfg, seed=0)
        z = torch.randn(4, 8, generator=torch.Generator().manual_seed(2))
        assert torch.equal(gen.map_latent(z), z)

    def test_nonfinite_rejected(self):
        gen = tiny_generator()
        z = torch.full((1, TINY.z_dim), float("inf"), dtype=torch.float64)
        with pytest.raises(ValueError):
            gen.map_latent(z)

    def test_jacobian_matches_finite_differences(self):
        gen = tiny_generator(seed=3)
        z0 = torch.randn(1, TINY.z_dim, dtype=torch.float64,
                         generator=torch.Generator().manual_seed(4))
        jac = torch.autograd.functional.jacobian(gen.map_latent, z0)[0, :, 0, :]
        eps = 1e-5
        fd = torch.zeros_like(jac)
        with torch.no_grad():
            for i in range(TINY.z_dim):
                dz = torch.zeros_like(z0)
                dz[0, i] = eps
                fd[:, i] = (gen.map_latent(z0 + dz) - gen.map_latent(z0 - dz))[0] / (2 * eps)
        rel = (jac - fd).abs().max() / jac.abs().max()
        assert rel < 1e-4


class TestSynthesis:
    def test_broadcast_matches_single_style(self):
        gen = tiny_generator(seed=5)
        z = torch.randn(2, TINY.z_dim, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(6))
        w = gen.map_latent(z)
        wplus = w[:, None, :].expand(-1, gen.num_ws, -1).contiguous()
        assert torch.equal(gen.synthesize(w), gen.synthesize(wplus))

    def test_block_count_mismatch(self):
        gen = tiny_generator()
        bad = torch.randn(1, gen.num_ws + 1, TINY.w_dim, dtype=torch.float64)
        with pytest.raises(ValueError):
            gen.synthesize(bad)

    def test_taps_are_observers(self):
        gen = Generator(SynthesisConfig(resolution=32), seed=0)
        z = torch.randn(2, 64, generator=torch.Generator().manual_seed(7))
        w = gen.map_latent(z)
        image_with, taps = gen.synthesize(w, want_taps=True)
        image_without = gen.synthesize(w)
        assert torch.equal(image_with, image_without)
        assert sorted(taps) == [8, 16]
        assert taps[8].shape[-2:] == (8, 8)
        assert taps[16].shape[-2:] == (16, 16)

    def test_continuity_under_small_perturbation(self):
        gen = tiny_generator(seed=8)
        w = gen.map_latent(torch.randn(1, TINY.z_dim, dtype=torch.float64,
                                       generator=torch.Generator().manual_seed(9)))
        delta = torch.randn_like(w)
        delta = 1e-6 * delta / delta.norm()
        with torch.no_grad():
            diff = (gen.synthesize(w + delta) - gen.synthesize(w)).norm()
        assert float(diff) < 1e-3

    def test_image_gradient_matches_finite_differences(self):
        gen = tiny_generator(seed=10)
        w = gen.map_latent(torch.randn(1, TINY.z_dim, dtype=torch.float64,
                                       generator=torch.Generator().manual_seed(11)))
        w = w.detach().requires_grad_(True)
        y = torch.randn(1, 3, TINY.resolution, TINY.resolution, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(12))
        loss = (gen.synthesize(w) * y).sum()
        grad, = torch.autograd.grad(loss, w)
        eps = 1e-5
        fd = torch.zeros_like(w)
        with torch.no_grad():
            for i in range(TINY.w_dim):
                dw = torch.zeros_like(w)
                dw[0, i] = eps
                fd[0, i] = ((gen.synthesize(w + dw) * y).sum()
                            - (gen.synthesize(w - dw) * y).sum()) / (2 * eps)
        rel = (grad - fd).abs().max() / grad.abs().max()
        assert rel < 1e-4

    def test_noise_injection_frozen_is_deterministic(self):
        cfg = SynthesisConfig(resolution=16, z_dim=8, w_dim=8, base_channels=8,
                              channel_max=16, tap_resolutions=(8,), noise_injection=True)
        gen = Generator(cfg, seed=1)
        z = torch.randn(2, 8, generator=torch.Generator().manual_seed(3))
        w = gen.map_latent(z)
        assert torch.equal(gen.synthesize(w), gen.synthesize(w))

    def test_export_clamps(self):
        gen = Generator(SynthesisConfig(resolution=16, z_dim=8, w_dim=8, base_channels=8,
                                        channel_max=16, tap_resolutions=(8,)), seed=2)
        w = 100.0 * gen.map_latent(torch.randn(1, 8, generator=torch.Generator().manual_seed(0)))
        raw = gen.synthesize(w)
        exported = images_to_uint8(raw)
        assert exported.dtype == torch.uint8
        assert exported.shape == (1, 16, 16, 3)


class TestTruncate:
    def test_endpoints_exact(self):
        w = torch.randn(4, 8, generator=torch.Generator().manual_seed(1))
        w_mean = torch.randn(8, generator=torch.Generator().manual_seed(2))
        assert torch.equal(truncate(w, 1.0, w_mean), w)
        assert torch.equal(truncate(w, 0.0, w_mean), w_mean.expand_as(w))

    def test_affine(self):
        w_mean = torch.zeros(8)
        u = torch.randn(1, 8, generator=torch.Generator().manual_seed(3))
        out = truncate(w_mean + u, 0.7, w_mean)
        assert torch.allclose(out, 0.7 * u)

    def test_psi_out_of_range(self):
        w = torch.zeros(1, 8)
        with pytest.raises(ValueError):
            truncate(w, 1.5, torch.zeros(8))

    def test_mean_style_reproducible(self):
        gen = tiny_generator(seed=4)
        a = gen.mean_style(sample_count=500, seed=0)
        b = gen.mean_style(sample_count=500, seed=0)
        assert torch.equal(a, b)
