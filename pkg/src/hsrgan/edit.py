"""Latent editing: linear attribute directions, projection, linearity probe.

Directions are unit vectors in style space fitted as least-squares separators
between high- and low-scoring samples. Projection recovers per-block styles
for a target image by direct optimization. The linearity probe applies an
edit, re-projects, and measures how attribute scores bend along the latent
segment between the two recovered codes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import HashMismatchError, MetricError, ProjectionError
from .metrics import als_from_scores, interpolation_weights

log = logging.getLogger(__name__)


@dataclass
class EditDirection:
    attribute: str
    vector: np.ndarray            # unit norm in style space
    diagnostics: dict = field(default_factory=dict)
    checkpoint_hash: str = ""

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        norm = np.linalg.norm(self.vector)
        if abs(norm - 1.0) > 1e-8:
            raise ValueError(f"direction must be unit norm, got {norm}")

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "w") as fh:
            json.dump({"attribute": self.attribute, "vector": self.vector.tolist(),
                       "diagnostics": self.diagnostics,
                       "checkpoint_hash": self.checkpoint_hash}, fh, indent=2)
            fh.write("\n")
        return path

    @classmethod
    def load(cls, path, expect_checkpoint_hash=None, allow_mismatch=False):
        with open(path) as fh:
            payload = json.load(fh)
        direction = cls(attribute=payload["attribute"], vector=np.array(payload["vector"]),
                        diagnostics=payload.get("diagnostics", {}),
                        checkpoint_hash=payload.get("checkpoint_hash", ""))
        if (expect_checkpoint_hash is not None and direction.checkpoint_hash
                and direction.checkpoint_hash != expect_checkpoint_hash and not allow_mismatch):
            raise HashMismatchError(
                f"direction fitted against checkpoint {direction.checkpoint_hash}, "
                f"requested {expect_checkpoint_hash}")
        return direction


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def style_std(generator, n: int = 10000, seed: int = 0, batch_size: int = 1024) -> float:
    """Mean per-dimension standard deviation of mapped styles (edit unit)."""
    g = torch.Generator().manual_seed(seed)
    ws = []
    with torch.no_grad():
        remaining = n
        while remaining > 0:
            b = min(batch_size, remaining)
            ws.append(generator.map_latent(torch.randn(b, generator.cfg.z_dim, generator=g)))
            remaining -= b
    return float(torch.cat(ws).std(dim=0).mean())


def fit_direction_from_scores(w: np.ndarray, scores: np.ndarray, quantile: float = 0.2,
                              holdout_fraction: float = 0.2) -> tuple[np.ndarray, dict]:
    """Least-squares separator between top- and bottom-quantile samples.

    Returns (unit normal, diagnostics with held-out separation accuracy).
    """
    w = np.asarray(w, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    n = w.shape[0]
    count = max(1, int(n * quantile))
    order = np.argsort(scores, kind="stable")
    lo, hi = order[:count], order[-count:]
    x = np.concatenate([w[hi], w[lo]])
    y = np.concatenate([np.ones(count), -np.ones(count)])
    n_hold = min(max(1, int(len(x) * holdout_fraction)), len(x) - 2)
    perm = np.random.default_rng(0).permutation(len(x))  # fixed shuffle: deterministic
    x, y = x[perm], y[perm]
    x_tr, x_te = x[:-n_hold], x[-n_hold:]
    y_tr, y_te = y[:-n_hold], y[-n_hold:]
    design = np.concatenate([x_tr, np.ones((len(x_tr), 1))], axis=1)
    beta, *_ = np.linalg.lstsq(design, y_tr, rcond=None)
    normal, bias = beta[:-1], beta[-1]
    preds = np.sign(x_te @ normal + bias)
    accuracy = float((preds == y_te).mean())
    norm = np.linalg.norm(normal)
    if norm == 0:
        raise MetricError("degenerate separator: zero normal vector")
    return normal / norm, {"separation_accuracy": accuracy, "n_samples": n,
                           "quantile": quantile}


def find_direction(generator, score_fn, attribute: str = "", n_samples: int = 10000,
                   quantile: float = 0.2, seed: int = 0, batch_size: int = 256,
                   checkpoint_hash: str = "", probe_count: int = 128) -> EditDirection:
    """Fit an attribute direction in style space.

    `score_fn` maps an image batch to per-image scores. The sign is chosen so
    that moving along +d increases the score on a held-out probe set.
    """
    if n_samples < 1000:
        raise MetricError(f"n_samples must be >= 1000, got {n_samples}")
    g = torch.Generator().manual_seed(seed)
    ws, scores = [], []
    with torch.no_grad():
        remaining = n_samples + probe_count
        while remaining > 0:
            b = min(batch_size, remaining)
            w = generator.map_latent(torch.randn(b, generator.cfg.z_dim, generator=g))
            ws.append(w)
            scores.append(score_fn(generator.synthesize(w)))
            remaining -= b
    w_all = torch.cat(ws)
    s_all = torch.cat(scores)
    w_fit = w_all[:n_samples].double().numpy()
    s_fit = s_all[:n_samples].double().numpy()
    normal, diagnostics = fit_direction_from_scores(w_fit, s_fit, quantile=quantile)
    if diagnostics["separation_accuracy"] < 0.8:
        diagnostics["warning"] = "separation accuracy below 0.8"
        log.warning("direction %s: separation accuracy %.3f below 0.8",
                    attribute, diagnostics["separation_accuracy"])
    # orient: +d must increase the score on held-out probes
    sigma = float(w_all.std(dim=0).mean())
    probe_w = w_all[n_samples:]
    d = torch.from_numpy(normal).to(probe_w.dtype)
    with torch.no_grad():
        up = score_fn(generator.synthesize(probe_w + sigma * d)).double().mean()
        down = score_fn(generator.synthesize(probe_w - sigma * d)).double().mean()
    if float(up) < float(down):
        normal = -normal
    diagnostics["sigma_w"] = sigma
    diagnostics["seed"] = seed
    return EditDirection(attribute=attribute, vector=normal, diagnostics=diagnostics,
                         checkpoint_hash=checkpoint_hash)


def apply_edit(w: torch.Tensor, direction, alpha: float) -> torch.Tensor:
    """Exact affine edit w + alpha * d (broadcasts over style blocks)."""
    d = direction.vector if isinstance(direction, EditDirection) else direction
    d = torch.as_tensor(d, dtype=w.dtype)
    return w + alpha * d


# --------------------------------------------------------------------------
# projection

@dataclass
class ProjectionResult:
    w_plus: torch.Tensor         # (B, L, Dw)
    pixel_mse: np.ndarray        # (B,)
    embed_dist: np.ndarray       # (B,)
    steps: int
    diverged: np.ndarray         # (B,) bool
    loss_trace: np.ndarray       # (checkpoints, B) total loss every record_every steps


def project_image(targets: torch.Tensor, generator, embedder, steps: int = 400,
                  lr: float = 0.05, seed: int = 0, w_mean=None,
                  record_every: int = 50) -> ProjectionResult:
    """Optimize per-block styles so the synthesis matches the target images.

    Loss per sample is pixel MSE plus embedding MSE with equal weights; the
    step schedule is fixed (Adam, cosine-decayed learning rate), so results
    are deterministic given the seed.
    """
    if targets.dim() == 3:
        targets = targets[None]
    if targets.shape[-1] != generator.cfg.resolution:
        raise MetricError(f"target resolution {targets.shape[-1]} != generator "
                          f"{generator.cfg.resolution}")
    b = targets.shape[0]
    if w_mean is None:
        w_mean = generator.mean_style(seed=seed)
    w_opt = w_mean.detach().clone()[None, None, :].repeat(b, generator.num_ws, 1)
    w_opt.requires_grad_(True)
    opt = torch.optim.Adam([w_opt], lr=lr)
    with torch.no_grad():
        target_emb = embedder.embed(targets)

    def losses(w):
        images = generator.synthesize(w)
        pix = (images - targets).pow(2).mean(dim=(1, 2, 3))
        emb = (embedder.embed(images) - target_emb).pow(2).mean(dim=1)
        return pix, emb

    trace = []
    with torch.no_grad():
        p0, e0 = losses(w_opt)
        initial = (p0 + e0).numpy().copy()
        trace.append(initial)
    for step in range(steps):
        opt.param_groups[0]["lr"] = lr * 0.5 * (1.0 + math.cos(math.pi * step / max(steps, 1)))
        pix, emb = losses(w_opt)
        loss = (pix + emb).sum()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if (step + 1) % record_every == 0 or step == steps - 1:
            with torch.no_grad():
                p, e = losses(w_opt)
                trace.append((p + e).numpy().copy())
    with torch.no_grad():
        pix, emb = losses(w_opt)
    final = (pix + emb).numpy()
    return ProjectionResult(
        w_plus=w_opt.detach(), pixel_mse=pix.numpy(), embed_dist=emb.numpy(),
        steps=steps, diverged=final > initial, loss_trace=np.stack(trace))


# --------------------------------------------------------------------------
# linearity probe and image grids

def edit_linearity_eval(image: torch.Tensor, direction: EditDirection, alpha: float,
                        scorers, generator, embedder, n_steps: int = 10,
                        project_kwargs: dict | None = None) -> dict:
    """Score the latent segment between a projected image and its edit.

    The source image is projected to per-block styles, the edit is applied,
    the edited render is re-projected, and attribute scores on the segment
    between the two codes are compared against the straight line. With
    alpha == 0 the edit is a no-op and both endpoints are the same code.
    """
    kwargs = dict(project_kwargs or {})
    proj_a = project_image(image, generator, embedder, **kwargs)
    if proj_a.diverged.any():
        raise ProjectionError(f"projection of source image diverged "
                              f"(final losses {proj_a.pixel_mse + proj_a.embed_dist})")
    w_a = proj_a.w_plus
    if alpha == 0.0:
        w_b, proj_b = w_a, proj_a
    else:
        w_edit = apply_edit(w_a, direction, alpha)
        with torch.no_grad():
            edited = generator.synthesize(w_edit)
        proj_b = project_image(edited, generator, embedder, **kwargs)
        if proj_b.diverged.any():
            raise ProjectionError(f"projection of edited image diverged "
                                  f"(final losses {proj_b.pixel_mse + proj_b.embed_dist})")
        w_b = proj_b.w_plus
    weights = torch.from_numpy(interpolation_weights(n_steps))
    m = len(scorers.names)
    scores = np.zeros((n_steps + 1, m))
    with torch.no_grad():
        for i in range(n_steps + 1):
            c0 = weights[i, 0].to(w_a.dtype)
            c1 = weights[i, 1].to(w_a.dtype)
            wt = c0 * w_a + c1 * w_b
            scores[i] = scorers.score(generator.synthesize(wt)).double().numpy()[0]
    deviations = als_from_scores(scores, n_steps)
    return {
        "scores": scores,                              # (N+1, M)
        "deviations": deviations,                      # (N+1, M)
        "per_attribute": deviations.sum(axis=0) / n_steps,
        "mean_deviation": float(deviations.sum() / (n_steps * m)),
        "projection_source": proj_a,
        "projection_edited": proj_b,
        "attribute_names": tuple(scorers.names),
        "alpha": alpha,
    }


def write_score_matrix_csv(path, scores: np.ndarray, n_steps: int, names):
    """One row per (t, attribute): (N+1) * M rows."""
    with open(path, "w") as fh:
        fh.write("t,attribute,score\n")
        for i in range(scores.shape[0]):
            for j, name in enumerate(names):
                fh.write(f"{i / n_steps:.6g},{name},{scores[i, j]:.6g}\n")


def interpolate_grid(w_pairs, n_steps: int, generator) -> list[np.ndarray]:
    """Render one horizontal strip per latent pair, t ascending left to right.

    `w_pairs` is (P, 2, Dw) or (P, 2, L, Dw); returns uint8 arrays of shape
    (H, (N+1) * W, 3).
    """
    from .generator import images_to_uint8
    weights = torch.from_numpy(interpolation_weights(n_steps))
    grids = []
    with torch.no_grad():
        for pair in w_pairs:
            w0 = torch.as_tensor(pair[0], dtype=torch.float32)[None]
            w1 = torch.as_tensor(pair[1], dtype=torch.float32)[None]
            frames = []
            for i in range(n_steps + 1):
                c0 = weights[i, 0].to(w0.dtype)
                c1 = weights[i, 1].to(w0.dtype)
                image = generator.synthesize(c0 * w0 + c1 * w1)
                frames.append(images_to_uint8(image)[0].numpy())
            grids.append(np.concatenate(frames, axis=1))
    return grids
