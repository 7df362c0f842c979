"""Adversarial training loop with feature alignment, lazy regularizers,
generator EMA, JSONL logging, and bit-reproducible checkpointing.

Each step runs one discriminator update followed by one generator update on
fresh batches. All randomness is drawn from two explicit generators (data and
noise streams) whose states travel with the checkpoint, so a resumed run
reproduces an uninterrupted one bit for bit on the same platform and thread
count.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics as metrics_mod
from .checkpoint import load_container, save_container
from .discriminator import AugmentConfig, Discriminator, augment
from .errors import ConfigError, TrainingDivergedError
from .generator import Generator, SynthesisConfig
from .hsr import HSRConfig, HsrRegularizer
from .regularize import PLRConfig, R1Config, path_length_penalty, r1_penalty
from .synthdata import load_dataset

log = logging.getLogger(__name__)

LOSS_FORMS = ("non-saturating", "minimax")


@dataclass(frozen=True)
class TrainConfig:
    total_kimg: float = 500.0
    batch_size: int = 16
    lr: float = 2.5e-3
    beta1: float = 0.0
    beta2: float = 0.99
    adam_eps: float = 1e-8
    loss_form: str = "non-saturating"
    ema_halflife_kimg: float = 10.0
    eval_every_kimg: float = 50.0
    seed: int = 0
    data_seed: int = -1   # -1 -> derived from seed
    noise_seed: int = -1
    enable_plr: bool = True
    enable_hsr: bool = True
    hsr: HSRConfig = field(default_factory=HSRConfig)
    plr: PLRConfig = field(default_factory=PLRConfig)
    r1: R1Config = field(default_factory=R1Config)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (minibatch stddev)")
        if self.loss_form not in LOSS_FORMS:
            raise ConfigError(f"loss_form must be one of {LOSS_FORMS}")
        if self.total_kimg <= 0 or self.eval_every_kimg <= 0:
            raise ConfigError("total_kimg and eval_every_kimg must be > 0")
        if self.ema_halflife_kimg < 0:
            raise ConfigError("ema_halflife_kimg must be >= 0")

    def resolved_data_seed(self) -> int:
        return self.data_seed if self.data_seed >= 0 else self.seed + 1009

    def resolved_noise_seed(self) -> int:
        return self.noise_seed if self.noise_seed >= 0 else self.seed + 2003


class TrainState:
    def __init__(self, train_cfg: TrainConfig, model_cfg: SynthesisConfig,
                 images_u8: torch.Tensor, extractor=None):
        if train_cfg.enable_hsr and extractor is None:
            raise ConfigError("enable_hsr requires a frozen extractor")
        self.cfg = train_cfg
        self.model_cfg = model_cfg
        self.images = images_u8  # (N, H, W, 3) uint8
        self.G = Generator(model_cfg, seed=train_cfg.seed)
        self.D = Discriminator(model_cfg, seed=train_cfg.seed + 1)
        self.G_ema = copy.deepcopy(self.G)
        self.G_ema.requires_grad_(False)
        self.hsr = None
        if train_cfg.enable_hsr:
            self.hsr = HsrRegularizer(model_cfg, extractor, train_cfg.hsr,
                                      seed=train_cfg.seed + 2)
        g_params = list(self.G.parameters())
        if self.hsr is not None:
            g_params += list(self.hsr.parameters())
        adam = dict(lr=train_cfg.lr, betas=(train_cfg.beta1, train_cfg.beta2),
                    eps=train_cfg.adam_eps)
        self.opt_G = torch.optim.Adam(g_params, **adam)
        self.opt_D = torch.optim.Adam(self.D.parameters(), **adam)
        self.g_data = torch.Generator().manual_seed(train_cfg.resolved_data_seed())
        self.g_noise = torch.Generator().manual_seed(train_cfg.resolved_noise_seed())
        self.plr_a = 0.0
        self.step = 0
        self.last_checkpoint = None

    @property
    def kimg(self) -> float:
        return self.step * self.cfg.batch_size / 1000.0

    def ema_beta(self) -> float:
        hl = self.cfg.ema_halflife_kimg
        if hl <= 0:
            return 0.0
        return 0.5 ** (self.cfg.batch_size / (hl * 1000.0))


def _real_batch(state: TrainState) -> torch.Tensor:
    n = state.images.shape[0]
    idx = torch.randint(0, n, (state.cfg.batch_size,), generator=state.g_data)
    real = state.images[idx].permute(0, 3, 1, 2).float() / 127.5 - 1.0
    # online horizontal flip doubles the dataset in expectation
    flip = torch.rand(state.cfg.batch_size, generator=state.g_data) < 0.5
    return torch.where(flip[:, None, None, None], torch.flip(real, dims=[3]), real)


def _update_ema(state: TrainState):
    beta = state.ema_beta()
    with torch.no_grad():
        for p_ema, p in zip(state.G_ema.parameters(), state.G.parameters()):
            p_ema.copy_(p.detach().lerp(p_ema, beta))
        for b_ema, b in zip(state.G_ema.buffers(), state.G.buffers()):
            b_ema.copy_(b)


def train_step(state: TrainState) -> dict:
    """One discriminator update, then one generator update."""
    cfg = state.cfg
    b = cfg.batch_size
    z_dim = state.model_cfg.z_dim

    # --- discriminator
    real = _real_batch(state)
    z = torch.randn(b, z_dim, generator=state.g_noise)
    with torch.no_grad():
        fake = state.G.synthesize(state.G.map_latent(z))
    real_aug = augment(real, cfg.augment, state.g_noise)
    fake_aug = augment(fake, cfg.augment, state.g_noise)
    loss_d = F.softplus(-state.D(real_aug)).mean() + F.softplus(state.D(fake_aug)).mean()
    r1_value = None
    if cfg.r1.gamma > 0 and state.step % cfg.r1.interval == 0:
        penalty = r1_penalty(real_aug, state.D, cfg.r1.gamma)
        if penalty is not None:
            loss_d = loss_d + penalty
            r1_value = float(penalty.detach())
    _check_finite(state, "loss_D", loss_d)
    state.opt_D.zero_grad(set_to_none=True)
    loss_d.backward()
    state.opt_D.step()

    # --- generator
    z2 = torch.randn(b, z_dim, generator=state.g_noise)
    w = state.G.map_latent(z2)
    hsr_on = (state.hsr is not None and cfg.hsr.weight > 0
              and state.hsr.active(state.kimg))
    if hsr_on:
        fake2, taps = state.G.synthesize(w, want_taps=True)
    else:
        fake2 = state.G.synthesize(w)
    adv_logits = state.D(augment(fake2, cfg.augment, state.g_noise))
    if cfg.loss_form == "minimax":
        loss_g = -F.softplus(adv_logits).mean()
    else:
        loss_g = F.softplus(-adv_logits).mean()
    hsr_value = 0.0
    if hsr_on:
        hsr_loss = state.hsr.loss(taps, fake2, state.kimg)
        loss_g = loss_g + cfg.hsr.weight * hsr_loss
        hsr_value = float(hsr_loss.detach())
    if cfg.enable_plr and cfg.plr.weight > 0 and state.step % cfg.plr.interval == 0:
        w_pl = state.G.map_latent(torch.randn(b, z_dim, generator=state.g_noise))
        penalty, new_a, _ = path_length_penalty(
            w_pl, state.G.synthesize, state.plr_a, cfg.plr.decay, state.g_noise)
        if penalty is not None:
            loss_g = loss_g + cfg.plr.weight * penalty
            state.plr_a = new_a
    _check_finite(state, "loss_G", loss_g)
    state.opt_G.zero_grad(set_to_none=True)
    loss_g.backward()
    state.opt_G.step()
    _update_ema(state)
    state.step += 1

    return {"kimg": state.kimg, "loss_G": float(loss_g.detach()),
            "loss_D": float(loss_d.detach()), "loss_HSR": hsr_value,
            "plr_a": state.plr_a, "r1": r1_value}


def _check_finite(state: TrainState, name: str, value: torch.Tensor):
    if not torch.isfinite(value).all():
        raise TrainingDivergedError(
            f"{name} became non-finite at step {state.step} (kimg {state.kimg:.3f}); "
            f"last good checkpoint: {state.last_checkpoint}",
            last_checkpoint=state.last_checkpoint)


# --------------------------------------------------------------------------
# checkpointing

def _named_state_arrays(state: TrainState) -> dict:
    arrays = {}

    def add_module(prefix, module):
        for name, p in module.state_dict().items():
            arrays[f"{prefix}.{name}"] = p.detach().cpu().numpy().astype(np.float32)

    add_module("G", state.G)
    add_module("G_ema", state.G_ema)
    add_module("D", state.D)
    if state.hsr is not None:
        add_module("heads", state.hsr.heads)

    def add_optimizer(prefix, opt, named_params):
        for (name, param) in named_params:
            st = opt.state.get(param)
            if not st:
                continue
            arrays[f"{prefix}.{name}.m"] = st["exp_avg"].detach().numpy().astype(np.float32)
            arrays[f"{prefix}.{name}.v"] = st["exp_avg_sq"].detach().numpy().astype(np.float32)
            arrays[f"{prefix}.{name}.step"] = np.asarray(
                [float(st["step"])], dtype=np.float32)

    add_optimizer("opt_G", state.opt_G, _opt_g_named_params(state))
    add_optimizer("opt_D", state.opt_D, list(state.D.named_parameters()))
    arrays["plr.a"] = np.asarray([state.plr_a], dtype=np.float64)
    arrays["counter.step"] = np.asarray([state.step], dtype=np.int64)
    arrays["rng.data"] = state.g_data.get_state().numpy()
    arrays["rng.noise"] = state.g_noise.get_state().numpy()
    return arrays


def _opt_g_named_params(state: TrainState):
    named = list(state.G.named_parameters())
    if state.hsr is not None:
        named += [(f"heads.{n}", p) for n, p in state.hsr.heads.named_parameters()]
    return named


def config_echo(train_cfg: TrainConfig, model_cfg: SynthesisConfig) -> dict:
    echo = {"train": asdict(train_cfg), "model": asdict(model_cfg)}
    echo["model"]["tap_resolutions"] = list(model_cfg.tap_resolutions)
    return echo


def save_checkpoint(state: TrainState, path) -> Path:
    meta = {
        "format_version": 1,
        "kimg": state.kimg,
        "config": config_echo(state.cfg, state.model_cfg),
    }
    path = save_container(path, _named_state_arrays(state), meta)
    state.last_checkpoint = str(path)
    return path


def _load_module(module, arrays, prefix):
    sd = module.state_dict()
    for name, tensor in sd.items():
        key = f"{prefix}.{name}"
        tensor.copy_(torch.from_numpy(arrays[key]).to(tensor.dtype).reshape(tensor.shape))


def _load_optimizer(opt, arrays, prefix, named_params):
    opt_state = {}
    params = [p for _, p in named_params]
    for i, (name, param) in enumerate(named_params):
        key = f"{prefix}.{name}.m"
        if key not in arrays:
            continue
        opt_state[i] = {
            "step": torch.tensor(float(arrays[f"{prefix}.{name}.step"][0])),
            "exp_avg": torch.from_numpy(arrays[key]).reshape(param.shape).clone(),
            "exp_avg_sq": torch.from_numpy(arrays[f"{prefix}.{name}.v"]).reshape(param.shape).clone(),
        }
    groups = [dict(g, params=list(range(len(params)))) for g in opt.state_dict()["param_groups"]]
    opt.load_state_dict({"state": opt_state, "param_groups": groups})


def _flat_dict(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}.{k}" if prefix else str(k)
        if isinstance(v, dict):
            out.update(_flat_dict(v, key))
        else:
            out[key] = v
    return out


def check_config_match(stored: dict, current: dict):
    """Raise ConfigError listing keys that differ between config echoes."""
    a, b = _flat_dict(stored), _flat_dict(current)
    diffs = []
    for key in sorted(set(a) | set(b)):
        va, vb = a.get(key, "<missing>"), b.get(key, "<missing>")
        if isinstance(va, list):
            va = tuple(va)
        if isinstance(vb, list):
            vb = tuple(vb)
        if va != vb:
            diffs.append(f"{key}: checkpoint={va!r} vs requested={vb!r}")
    if diffs:
        raise ConfigError("resume config mismatch:\n  " + "\n  ".join(diffs))


def load_checkpoint_into(state: TrainState, path):
    arrays, meta = load_container(path)
    check_config_match(meta["config"], config_echo(state.cfg, state.model_cfg))
    with torch.no_grad():
        _load_module(state.G, arrays, "G")
        _load_module(state.G_ema, arrays, "G_ema")
        _load_module(state.D, arrays, "D")
        if state.hsr is not None:
            _load_module(state.hsr.heads, arrays, "heads")
    _load_optimizer(state.opt_G, arrays, "opt_G", _opt_g_named_params(state))
    _load_optimizer(state.opt_D, arrays, "opt_D", list(state.D.named_parameters()))
    state.plr_a = float(arrays["plr.a"][0])
    state.step = int(arrays["counter.step"][0])
    state.g_data.set_state(torch.from_numpy(arrays["rng.data"]))
    state.g_noise.set_state(torch.from_numpy(arrays["rng.noise"]))
    state.last_checkpoint = str(path)
    return state


# --------------------------------------------------------------------------
# full runs

def quick_eval(state: TrainState, embedder, n_samples: int = 1024) -> dict:
    """Small-sample distribution and smoothness estimates on the EMA weights."""
    if embedder is None:
        return {"fid_proxy": None, "ppl_quick": None}
    eval_seed = state.cfg.seed + 7919 + state.step
    g = torch.Generator().manual_seed(eval_seed)
    n_real = min(n_samples, state.images.shape[0])
    idx = torch.randperm(state.images.shape[0], generator=g)[:n_real]
    real = state.images[idx].permute(0, 3, 1, 2).float() / 127.5 - 1.0
    with torch.no_grad():
        real_emb = metrics_mod.embed_batched(embedder, real)
        fake_emb = metrics_mod.generator_embeddings(state.G_ema, embedder, n_samples,
                                                    seed=eval_seed + 1)
    fid = metrics_mod.frechet_distance(real_emb, fake_emb)
    ppl = metrics_mod.ppl(state.G_ema, embedder, n_pairs=min(n_samples, 512),
                          seed=eval_seed + 2).mean
    return {"fid_proxy": float(fid), "ppl_quick": float(ppl)}


def run_training(dataset_dir, out_dir, train_cfg: TrainConfig, model_cfg: SynthesisConfig,
                 extractor=None, embedder=None, resume_from=None, log_every: int = 1,
                 progress_fn=None):
    """Train to total_kimg, writing log.jsonl, checkpoints, and eval reports.

    Returns the path of the final checkpoint.
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(dataset_dir)
    if dataset.spec.resolution != model_cfg.resolution:
        raise ConfigError(
            f"dataset resolution {dataset.spec.resolution} != model resolution {model_cfg.resolution}")
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset archive")
    images = torch.from_numpy(dataset.images)
    if embedder is None and extractor is not None:
        embedder = extractor
    state = TrainState(train_cfg, model_cfg, images, extractor=extractor)
    if resume_from is not None:
        load_checkpoint_into(state, resume_from)

    start = time.monotonic()
    total_steps = int(round(train_cfg.total_kimg * 1000 / train_cfg.batch_size))
    eval_steps = max(1, int(round(train_cfg.eval_every_kimg * 1000 / train_cfg.batch_size)))
    log_path = out_dir / "log.jsonl"
    with open(log_path, "a") as log_fh:
        while state.step < total_steps:
            stats = train_step(state)
            if state.step % log_every == 0 or state.step == total_steps:
                entry = {"kimg": stats["kimg"], "loss_G": stats["loss_G"],
                         "loss_D": stats["loss_D"], "loss_HSR": stats["loss_HSR"],
                         "plr_a": stats["plr_a"], "fid_proxy": None, "ppl_quick": None,
                         "wallclock_s": time.monotonic() - start}
                log_fh.write(json.dumps(entry) + "\n")
            if state.step % eval_steps == 0 or state.step == total_steps:
                path = save_checkpoint(state, ckpt_dir / f"snapshot-{state.step:08d}.ckpt")
                ev = quick_eval(state, embedder)
                entry = {"kimg": state.kimg, "loss_G": stats["loss_G"],
                         "loss_D": stats["loss_D"], "loss_HSR": stats["loss_HSR"],
                         "plr_a": stats["plr_a"], "fid_proxy": ev["fid_proxy"],
                         "ppl_quick": ev["ppl_quick"],
                         "wallclock_s": time.monotonic() - start}
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
                if progress_fn:
                    progress_fn(entry)
    final = save_checkpoint(state, ckpt_dir / "last.ckpt")
    return final


def build_generator_from_checkpoint(path):
    """Reconstruct (G_ema, model_cfg, meta) from a stored checkpoint."""
    arrays, meta = load_container(path)
    model_kwargs = dict(meta["config"]["model"])
    model_kwargs["tap_resolutions"] = tuple(model_kwargs.get("tap_resolutions", ()))
    model_cfg = SynthesisConfig(**model_kwargs)
    gen = Generator(model_cfg)
    with torch.no_grad():
        _load_module(gen, arrays, "G_ema")
    gen.requires_grad_(False).eval()
    return gen, model_cfg, meta


GRID_CELLS = ((False, False), (False, True), (True, False), (True, True))


def run_table4_grid(dataset_dir, out_root, train_cfg: TrainConfig, model_cfg: SynthesisConfig,
                    extractor, seeds=(0, 1, 2), progress_fn=None) -> list[dict]:
    """Run the 2x2 regularizer grid (PLR x HSR), several seeds per cell.

    Configs across cells differ only in the two enable flags (and seed).
    """
    runs = []
    for enable_plr, enable_hsr in GRID_CELLS:
        for seed in seeds:
            cfg = replace(train_cfg, enable_plr=enable_plr, enable_hsr=enable_hsr, seed=seed)
            name = f"plr{int(enable_plr)}_hsr{int(enable_hsr)}_seed{seed}"
            run_dir = Path(out_root) / name
            final = run_training(dataset_dir, run_dir, cfg, model_cfg,
                                 extractor=extractor, progress_fn=progress_fn)
            runs.append({"name": name, "enable_plr": enable_plr, "enable_hsr": enable_hsr,
                         "seed": seed, "checkpoint": str(final), "dir": str(run_dir)})
    return runs
