import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch import nn

from hsrgan.errors import ConfigError, ExtractorTrainingError
from hsrgan.generator import Generator, SynthesisConfig
from hsrgan.hsr import (HSRConfig, HsrRegularizer, build_extractor, default_grid,
                        group_pair_indices, load_extractor, save_extractor)

from conftest import TINY


@pytest.fixture(scope="module")
def tiny_setup():
    gen = Generator(TINY, seed=0)
    extractor = build_extractor("random-init", input_resolution=TINY.resolution,
                                widths=(6, 8, 10, 12), seed=1)
    z = torch.randn(2, TINY.z_dim, generator=torch.Generator().manual_seed(2))
    image, taps = gen.synthesize(gen.map_latent(z), want_taps=True)
    return gen, extractor, image, taps


def make_hsr(extractor, **overrides):
    kwargs = dict(warmup_kimg=0.0)
    kwargs.update(overrides)
    return HsrRegularizer(TINY, extractor, HSRConfig(**kwargs), seed=3)


class OracleHead(nn.Module):
    """Emits a fixed tensor regardless of input."""

    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x):
        return self.value


class TestLossOracle:
    def test_zero_when_predictor_equals_target(self, tiny_setup):
        _, extractor, image, taps = tiny_setup
        hsr = make_hsr(extractor)
        targets = [F.interpolate(extractor.stages(image.detach())[stage],
                                 size=(hsr.grid,) * 2, mode="bilinear", align_corners=False)
                   for _, stage in hsr.pairs]
        hsr.heads = nn.ModuleList([OracleHead(t) for t in targets])
        assert float(hsr.loss(taps, image, kimg=1.0)) == 0.0

    def test_quarter_at_constant_offset(self, tiny_setup):
        _, extractor, image, taps = tiny_setup
        hsr = make_hsr(extractor)
        targets = [F.interpolate(extractor.stages(image.detach())[stage],
                                 size=(hsr.grid,) * 2, mode="bilinear", align_corners=False)
                   for _, stage in hsr.pairs]
        hsr.heads = nn.ModuleList([OracleHead(t + 0.5) for t in targets])
        assert float(hsr.loss(taps, image, kimg=1.0)) == pytest.approx(0.25, abs=1e-7)

    def test_gradient_matches_finite_differences(self):
        # double precision, tiny nets, gradient w.r.t. a generator tap
        gen = Generator(TINY, seed=4).double()
        extractor = build_extractor("random-init", input_resolution=TINY.resolution,
                                    widths=(4, 5, 6, 7), seed=5)
        extractor.net.double()
        hsr = make_hsr(extractor, stop_gradient=True)
        hsr.heads.double()
        z = torch.randn(1, TINY.z_dim, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(6))
        with torch.no_grad():
            image, taps = gen.synthesize(gen.map_latent(z), want_taps=True)
        tap_res = hsr.pairs[0][0]
        tap = taps[tap_res].detach().requires_grad_(True)
        loss = hsr.loss({tap_res: tap}, image, kimg=1.0)
        grad, = torch.autograd.grad(loss, tap)
        eps = 1e-5
        for idx in [(0, 0, 1, 2), (0, 3, 4, 5)]:
            d = torch.zeros_like(tap)
            d[idx] = eps
            with torch.no_grad():
                lp = hsr.loss({tap_res: tap + d}, image, kimg=1.0)
                lm = hsr.loss({tap_res: tap - d}, image, kimg=1.0)
            fd = (lp - lm) / (2 * eps)
            assert abs(fd - grad[idx]) / abs(grad[idx]) < 1e-4

    def test_warmup_inactive_returns_zero(self, tiny_setup):
        _, extractor, image, taps = tiny_setup
        hsr = make_hsr(extractor, warmup_kimg=25.0)
        assert not hsr.active(24.9)
        assert hsr.active(25.0)
        assert float(hsr.loss(taps, image, kimg=10.0)) == 0.0

    def test_nonnegative(self, tiny_setup):
        _, extractor, image, taps = tiny_setup
        hsr = make_hsr(extractor)
        assert float(hsr.loss(taps, image, kimg=1.0).detach()) >= 0.0


class TestStopGradient:
    def test_severed_predictor_path_zeroes_generator_grads(self):
        gen = Generator(TINY, seed=7)
        extractor = build_extractor("random-init", input_resolution=TINY.resolution,
                                    widths=(4, 5, 6, 7), seed=8)
        hsr = make_hsr(extractor, stop_gradient=True)
        z = torch.randn(2, TINY.z_dim, generator=torch.Generator().manual_seed(9))
        image, taps = gen.synthesize(gen.map_latent(z), want_taps=True)
        # sever the predictor path: detach every tap fed to the heads
        severed = {r: t.detach() for r, t in taps.items()}
        loss = hsr.loss(severed, image, kimg=1.0)
        grads = torch.autograd.grad(loss, list(gen.parameters()), allow_unused=True)
        assert all(g is None or float(g.abs().max()) == 0.0 for g in grads)

    def test_with_stop_gradient_grads_flow_only_through_heads(self):
        gen = Generator(TINY, seed=7)
        extractor = build_extractor("random-init", input_resolution=TINY.resolution,
                                    widths=(4, 5, 6, 7), seed=8)
        hsr = make_hsr(extractor, stop_gradient=True)
        z = torch.randn(2, TINY.z_dim, generator=torch.Generator().manual_seed(9))
        image, taps = gen.synthesize(gen.map_latent(z), want_taps=True)
        loss = hsr.loss(taps, image, kimg=1.0)
        grads = torch.autograd.grad(loss, list(gen.parameters()), allow_unused=True)
        assert any(g is not None and float(g.abs().max()) > 0 for g in grads)

    def test_without_stop_gradient_image_branch_contributes(self):
        gen = Generator(TINY, seed=7)
        extractor = build_extractor("random-init", input_resolution=TINY.resolution,
                                    widths=(4, 5, 6, 7), seed=8)
        hsr_on = make_hsr(extractor, stop_gradient=True)
        hsr_off = make_hsr(extractor, stop_gradient=False)
        z = torch.randn(2, TINY.z_dim, generator=torch.Generator().manual_seed(9))
        image, taps = gen.synthesize(gen.map_latent(z), want_taps=True)
        g_on = torch.autograd.grad(hsr_on.loss(taps, image, 1.0),
                                   list(gen.parameters()), allow_unused=True,
                                   retain_graph=True)
        image, taps = gen.synthesize(gen.map_latent(z), want_taps=True)
        g_off = torch.autograd.grad(hsr_off.loss(taps, image, 1.0),
                                    list(gen.parameters()), allow_unused=True)
        pairs = [(a, b) for a, b in zip(g_on, g_off) if a is not None and b is not None]
        assert any(not torch.allclose(a, b) for a, b in pairs)


class TestGroups:
    def test_windows(self):
        assert group_pair_indices(4, "all") == (0, 1, 2, 3)
        assert group_pair_indices(4, "high") == (0, 1)
        assert group_pair_indices(4, "mid") == (1, 2)
        assert group_pair_indices(4, "low") == (2, 3)
        assert group_pair_indices(2, "high") == (0, 1)
        assert group_pair_indices(3, "mid") == (1, 2)
        assert group_pair_indices(4, "none") == ()

    def test_none_group_loss_is_zero(self, tiny_setup):
        _, extractor, image, taps = tiny_setup
        hsr = make_hsr(extractor, tap_groups="none")
        assert not hsr.active(100.0)
        assert float(hsr.loss(taps, image, kimg=100.0)) == 0.0


class TestExtractors:
    def test_frozen_and_deterministic(self, tiny_setup):
        _, extractor, image, _ = tiny_setup
        a = extractor.stages(image.detach())
        b = extractor.stages(image.detach())
        assert all(torch.equal(x, y) for x, y in zip(a, b))

    def test_random_init_reproducible(self):
        a = build_extractor("random-init", input_resolution=16, widths=(4, 5, 6, 7), seed=42)
        b = build_extractor("random-init", input_resolution=16, widths=(4, 5, 6, 7), seed=42)
        assert all(torch.equal(p, q) for p, q in
                   zip(a.net.parameters(), b.net.parameters()))

    def test_random_init_nonzero_variance(self):
        ext = build_extractor("random-init", input_resolution=16, widths=(4, 5, 6, 7), seed=0)
        x = torch.randn(4, 3, 16, 16, generator=torch.Generator().manual_seed(1))
        for feat in ext.stages(x):
            assert float(feat.var()) > 0

    def test_stage_channels_match_declared(self, tiny_setup):
        _, extractor, image, _ = tiny_setup
        feats = extractor.stages(image.detach())
        assert [f.shape[1] for f in feats] == extractor.stage_channels

    def test_trained_extractor_meets_bar(self, trained_extractor):
        mse = trained_extractor.manifest["per_factor_mse"]
        assert max(mse) < 0.02

    def test_trained_extractor_frozen_through_use(self, trained_extractor, tiny_setup):
        gen, _, image, taps = tiny_setup
        before = [p.clone() for p in trained_extractor.net.parameters()]
        hsr = HsrRegularizer(TINY, trained_extractor, HSRConfig(warmup_kimg=0.0), seed=0)
        loss = hsr.loss(taps, image, kimg=1.0)
        loss.backward()
        after = list(trained_extractor.net.parameters())
        assert all(torch.equal(a, b) for a, b in zip(before, after))
        assert all(not p.requires_grad for p in after)

    def test_plugin_channel_mismatch_rejected(self):
        def fn(images):
            return [torch.zeros(images.shape[0], 4, 4, 4)]
        with pytest.raises(ConfigError):
            build_extractor("external-plugin", feature_fn=fn,
                            manifest={"stage_channels": [8], "input_resolution": 16})

    def test_plugin_valid(self):
        def fn(images):
            return [images.mean(dim=1, keepdim=True).repeat(1, 8, 1, 1)]
        ext = build_extractor("external-plugin", feature_fn=fn,
                              manifest={"stage_channels": [8], "input_resolution": 16})
        feats = ext.stages(torch.zeros(2, 3, 16, 16))
        assert feats[0].shape == (2, 8, 16, 16)

    def test_training_failure_names_achieved_mse(self, archive):
        with pytest.raises(ExtractorTrainingError, match="MSE"):
            build_extractor("trained", archive=archive, input_resolution=32,
                            widths=(2, 2, 2, 2), seed=0,
                            fit_kwargs={"max_epochs": 1})

    def test_save_load_round_trip(self, tmp_path, tiny_setup):
        _, extractor, image, _ = tiny_setup
        path = save_extractor(extractor, tmp_path / "ext.ckpt")
        loaded = load_extractor(path)
        a = extractor.stages(image.detach())
        b = loaded.stages(image.detach())
        assert all(torch.equal(x, y) for x, y in zip(a, b))
        assert loaded.manifest == extractor.manifest


class TestGrid:
    def test_default_grid(self):
        assert default_grid(32) == 7
        assert default_grid(64) == 14

    def test_head_channel_pairing(self, tiny_setup):
        _, extractor, _, _ = tiny_setup
        hsr = make_hsr(extractor)
        # lowest-res tap pairs with the deepest stage
        assert hsr.pairs[0] == (8, 3)
        head = hsr.heads[0]
        assert head.conv1.in_channels == TINY.channels(8)
        assert head.conv2.out_channels == extractor.stage_channels[3]
