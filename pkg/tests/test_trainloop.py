import dataclasses
import json

import numpy as np
import pytest
import torch

from hsrgan.checkpoint import load_container, save_container
from hsrgan.errors import ArchiveError, ConfigError
from hsrgan.generator import SynthesisConfig
from hsrgan.hsr import HSRConfig, build_extractor
from hsrgan.trainloop import (TrainConfig, TrainState, check_config_match, load_checkpoint_into,
                              run_table4_grid, run_training, save_checkpoint, train_step,
                              build_generator_from_checkpoint)

from conftest import TINY

TRAIN_TINY = SynthesisConfig(resolution=16, z_dim=12, w_dim=12, mapping_depth=2,
                             base_channels=8, channel_max=16, tap_resolutions=(8,))


@pytest.fixture(scope="module")
def tiny_images():
    g = torch.Generator().manual_seed(0)
    return torch.randint(0, 256, (64, 16, 16, 3), generator=g, dtype=torch.uint8)


@pytest.fixture(scope="module")
def tiny_extractor():
    return build_extractor("random-init", input_resolution=16, widths=(4, 6, 8, 10), seed=1)


def tiny_cfg(**overrides):
    kwargs = dict(total_kimg=0.2, batch_size=4, eval_every_kimg=0.1, seed=0,
                  enable_plr=False, enable_hsr=False, hsr=HSRConfig(warmup_kimg=0.0))
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def run_steps(cfg, images, extractor, n):
    state = TrainState(cfg, TRAIN_TINY, images, extractor=extractor)
    stats = [train_step(state) for _ in range(n)]
    return state, stats


def params_equal(a, b):
    return all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


class TestContainer:
    def test_round_trip(self, tmp_path):
        arrays = {
            "a.weight": np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32),
            "count": np.array([7], dtype=np.int64),
            "blob": np.arange(10, dtype=np.uint8),
        }
        path = save_container(tmp_path / "c.bin", arrays, meta={"x": 1})
        loaded, meta = load_container(path)
        assert meta == {"x": 1}
        for k in arrays:
            assert np.array_equal(loaded[k], arrays[k])
            assert loaded[k].dtype == arrays[k].dtype

    def test_deterministic_bytes(self, tmp_path):
        arrays = {"b": np.ones(3, dtype=np.float32), "a": np.zeros(2, dtype=np.float32)}
        p1 = save_container(tmp_path / "1.bin", arrays, meta={"k": "v"})
        p2 = save_container(tmp_path / "2.bin", dict(reversed(list(arrays.items()))),
                            meta={"k": "v"})
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_file(self, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"nonsense")
        with pytest.raises(ArchiveError):
            load_container(bad)


class TestTrainStep:
    def test_two_runs_bit_identical(self, tiny_images):
        a, stats_a = run_steps(tiny_cfg(), tiny_images, None, 12)
        b, stats_b = run_steps(tiny_cfg(), tiny_images, None, 12)
        assert params_equal(a.G, b.G)
        assert params_equal(a.D, b.D)
        assert params_equal(a.G_ema, b.G_ema)
        assert stats_a == stats_b

    def test_minimax_vs_nonsaturating(self, tiny_images):
        # identical parameters and batches: D losses agree, G losses differ
        a, sa = run_steps(tiny_cfg(loss_form="non-saturating"), tiny_images, None, 1)
        b, sb = run_steps(tiny_cfg(loss_form="minimax"), tiny_images, None, 1)
        assert sa[0]["loss_D"] == sb[0]["loss_D"]
        assert sa[0]["loss_G"] != sb[0]["loss_G"]

    def test_losses_finite(self, tiny_images, tiny_extractor):
        cfg = tiny_cfg(enable_plr=True, enable_hsr=True)
        _, stats = run_steps(cfg, tiny_images, tiny_extractor, 25)
        for s in stats:
            assert np.isfinite(s["loss_G"]) and np.isfinite(s["loss_D"])

    def test_hsr_warmup_gates_loss(self, tiny_images, tiny_extractor):
        cfg = tiny_cfg(enable_hsr=True, hsr=HSRConfig(warmup_kimg=0.02))
        state = TrainState(cfg, TRAIN_TINY, tiny_images, extractor=tiny_extractor)
        pre = train_step(state)   # kimg 0.000 -> inactive
        assert pre["loss_HSR"] == 0.0
        for _ in range(5):
            post = train_step(state)
        assert post["loss_HSR"] > 0.0

    def test_disabled_groups_match_baseline_losses(self, tiny_images, tiny_extractor):
        base, stats_base = run_steps(tiny_cfg(), tiny_images, None, 8)
        cfg = tiny_cfg(enable_hsr=True, hsr=HSRConfig(warmup_kimg=0.0, tap_groups="none"))
        none, stats_none = run_steps(cfg, tiny_images, tiny_extractor, 8)
        for a, b in zip(stats_base, stats_none):
            assert a["loss_G"] == b["loss_G"]
            assert a["loss_D"] == b["loss_D"]
        assert params_equal(base.G, none.G)

    def test_plr_zero_weight_matches_baseline(self, tiny_images):
        from hsrgan.regularize import PLRConfig
        base, stats_base = run_steps(tiny_cfg(enable_plr=False), tiny_images, None, 8)
        zero, stats_zero = run_steps(
            tiny_cfg(enable_plr=True, plr=PLRConfig(weight=0.0)), tiny_images, None, 8)
        assert stats_base == stats_zero
        assert params_equal(base.G, zero.G)

    def test_plr_state_frozen_off_interval(self, tiny_images):
        from hsrgan.regularize import PLRConfig
        cfg = tiny_cfg(enable_plr=True, plr=PLRConfig(interval=4))
        state = TrainState(cfg, TRAIN_TINY, tiny_images, extractor=None)
        train_step(state)          # step 0: on-interval, updates the average
        a_after_first = state.plr_a
        for _ in range(3):         # steps 1..3 are off-interval
            train_step(state)
            assert state.plr_a == a_after_first

    def test_ema_halflife_zero_copies_generator(self, tiny_images):
        cfg = tiny_cfg(ema_halflife_kimg=0.0)
        state, _ = run_steps(cfg, tiny_images, None, 3)
        assert params_equal(state.G, state.G_ema)

    def test_batch_too_small_rejected(self):
        with pytest.raises(ConfigError):
            tiny_cfg(batch_size=1)


class TestCheckpointing:
    def test_resume_bit_exact(self, tiny_images, tiny_extractor, tmp_path):
        cfg = tiny_cfg(enable_plr=True, enable_hsr=True)
        full = TrainState(cfg, TRAIN_TINY, tiny_images, extractor=tiny_extractor)
        for _ in range(6):
            train_step(full)
        snap = save_checkpoint(full, tmp_path / "snap.ckpt")
        for _ in range(6):
            train_step(full)

        resumed = TrainState(cfg, TRAIN_TINY, tiny_images, extractor=tiny_extractor)
        load_checkpoint_into(resumed, snap)
        for _ in range(6):
            train_step(resumed)
        pa = save_checkpoint(full, tmp_path / "a.ckpt")
        pb = save_checkpoint(resumed, tmp_path / "b.ckpt")
        assert pa.read_bytes() == pb.read_bytes()

    def test_config_mismatch_lists_keys(self, tiny_images, tmp_path):
        state, _ = run_steps(tiny_cfg(), tiny_images, None, 2)
        snap = save_checkpoint(state, tmp_path / "s.ckpt")
        other = TrainState(tiny_cfg(lr=1e-3, seed=3), TRAIN_TINY, tiny_images)
        with pytest.raises(ConfigError) as err:
            load_checkpoint_into(other, snap)
        message = str(err.value)
        assert "train.lr" in message and "train.seed" in message

    def test_generator_rebuild(self, tiny_images, tmp_path):
        state, _ = run_steps(tiny_cfg(), tiny_images, None, 3)
        snap = save_checkpoint(state, tmp_path / "g.ckpt")
        gen, model_cfg, meta = build_generator_from_checkpoint(snap)
        assert model_cfg == TRAIN_TINY
        z = torch.randn(2, TRAIN_TINY.z_dim, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            expected = state.G_ema.synthesize(state.G_ema.map_latent(z))
            actual = gen.synthesize(gen.map_latent(z))
        assert torch.equal(expected, actual)


class TestRunTraining:
    def test_run_and_resume_equivalence(self, tmp_path, dataset_dir):
        model = SynthesisConfig(resolution=32, z_dim=16, w_dim=16, mapping_depth=2,
                                base_channels=8, channel_max=32, tap_resolutions=(8, 16))
        cfg = TrainConfig(total_kimg=0.128, batch_size=4, eval_every_kimg=0.064,
                          seed=1, enable_plr=True, enable_hsr=False)
        final_a = run_training(dataset_dir, tmp_path / "a", cfg, model)
        # resume the same config from its midpoint snapshot
        mid = tmp_path / "a" / "checkpoints" / "snapshot-00000016.ckpt"
        assert mid.exists()
        final_b = run_training(dataset_dir, tmp_path / "b", cfg, model, resume_from=mid)
        assert final_a.read_bytes() == final_b.read_bytes()
        log_lines = (tmp_path / "a" / "log.jsonl").read_text().strip().splitlines()
        entries = [json.loads(line) for line in log_lines]
        assert all(np.isfinite(e["loss_G"]) and np.isfinite(e["loss_D"]) for e in entries)
        keys = {"kimg", "loss_G", "loss_D", "loss_HSR", "plr_a", "fid_proxy",
                "ppl_quick", "wallclock_s"}
        assert keys <= set(entries[0])

    def test_online_flip_probability(self, tiny_images):
        # flips occur for about half the sampled batch rows
        from hsrgan.trainloop import _real_batch
        state = TrainState(tiny_cfg(batch_size=4), TRAIN_TINY, tiny_images)
        asym = torch.zeros_like(tiny_images)
        asym[:, :, 0, :] = 255
        state.images = asym
        flipped = 0
        total = 0
        for _ in range(250):
            batch = _real_batch(state)
            flipped += int((batch[:, 0, 0, -1] > 0).sum())
            total += batch.shape[0]
        assert abs(flipped / total - 0.5) < 0.05

    def test_empty_dataset_rejected(self, tmp_path):
        from hsrgan.synthdata import DatasetSpec, generate_dataset
        out = generate_dataset(DatasetSpec(resolution=16, sample_count=0, seed=0),
                               tmp_path / "empty")
        with pytest.raises(ConfigError):
            run_training(out, tmp_path / "run", tiny_cfg(), TRAIN_TINY)


class TestGridDriver:
    def test_grid_configs_differ_only_in_flags(self, tmp_path, dataset_dir):
        model = SynthesisConfig(resolution=32, z_dim=8, w_dim=8, mapping_depth=1,
                                base_channels=4, channel_max=8, tap_resolutions=(8, 16))
        ext = build_extractor("random-init", input_resolution=32, widths=(4, 4, 4, 4), seed=0)
        cfg = TrainConfig(total_kimg=0.016, batch_size=4, eval_every_kimg=0.016, seed=0,
                          hsr=HSRConfig(warmup_kimg=0.0))
        runs = run_table4_grid(dataset_dir, tmp_path, cfg, model, ext, seeds=(0,))
        assert len(runs) == 4
        assert {(r["enable_plr"], r["enable_hsr"]) for r in runs} == {
            (False, False), (False, True), (True, False), (True, True)}
        configs = []
        for r in runs:
            _, meta = load_container(r["checkpoint"])
            echo = meta["config"]["train"]
            echo.pop("enable_plr"), echo.pop("enable_hsr")
            configs.append(json.dumps(echo, sort_keys=True))
        assert len(set(configs)) == 1
