"""Latent-space and distribution metrics.

Perceptual distances use the pooled deepest stage of the locally trained
extractor instead of a pretrained perceptual network; every report discloses
that substitution so numbers are never confused with full-scale results.

All metrics are read-only over frozen snapshots and bit-reproducible from
their seeds.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from sklearn.linear_model import Lasso

from .checkpoint import load_container, save_container
from .errors import ConfigError, MetricError, ScorerTrainingError
from .generator import truncate
from .hsr import ConvFactorNet, ExtractorTrainingError, fit_factor_regressor
from .synthdata import FACTOR_NAMES

SCORER_WIDTHS = (16, 32, 64, 128)

SUBSTITUTIONS = (
    "perceptual distance: pooled deepest-stage features of the locally trained "
    "extractor (stands in for a pretrained LPIPS network)",
    "augmentation: fixed-probability ops (stands in for an adaptive controller)",
)


# --------------------------------------------------------------------------
# embedding helpers

def embed_batched(embedder, images: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    """Embed images in [-1, 1]; returns float64 (N, C)."""
    outs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            outs.append(embedder.embed(images[start : start + batch_size]).double().numpy())
    return np.concatenate(outs, axis=0)


def sample_images(generator, n: int, seed: int, batch_size: int = 128,
                  truncation_psi=None, w_mean=None):
    """Yield image batches from z ~ N(0, I), optionally truncated in W."""
    g = torch.Generator().manual_seed(seed)
    remaining = n
    with torch.no_grad():
        while remaining > 0:
            b = min(batch_size, remaining)
            z = torch.randn(b, generator.cfg.z_dim, generator=g)
            w = generator.map_latent(z)
            if truncation_psi is not None:
                w = truncate(w, truncation_psi, w_mean)
            yield generator.synthesize(w)
            remaining -= b


def generator_embeddings(generator, embedder, n: int, seed: int,
                         batch_size: int = 128) -> np.ndarray:
    outs = []
    for batch in sample_images(generator, n, seed, batch_size):
        outs.append(embed_batched(embedder, batch))
    return np.concatenate(outs, axis=0)


# --------------------------------------------------------------------------
# perceptual path length

@dataclass
class PplResult:
    mean: float
    values: np.ndarray          # (n_pairs,)
    w0: np.ndarray              # (n_pairs, Dw) endpoints actually used
    w1: np.ndarray
    t: np.ndarray               # (n_pairs,)
    epsilon: float
    space: str


def _slerp(z0: torch.Tensor, z1: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    z0n = z0 / z0.norm(dim=1, keepdim=True)
    z1n = z1 / z1.norm(dim=1, keepdim=True)
    omega = torch.acos((z0n * z1n).sum(dim=1, keepdim=True).clamp(-1 + 1e-7, 1 - 1e-7))
    so = torch.sin(omega)
    return (torch.sin((1.0 - t) * omega) / so) * z0 + (torch.sin(t * omega) / so) * z1


def ppl(generator, embedder, n_pairs: int = 10000, epsilon: float = 1e-4,
        space: str = "w", batch_size: int = 64, seed: int = 0,
        dtype: torch.dtype = torch.float32) -> PplResult:
    """Squared embedding distance under an epsilon step along latent paths.

    Endpoints are sampled without truncation; t is uniform on the full path.
    `space` is "w" (linear interpolation in style space) or "z" (spherical
    interpolation in noise space, then mapped). Pass a float64 `dtype` (with a
    float64 generator) when the epsilon step must not drown in rounding.
    """
    if epsilon <= 0:
        raise MetricError(f"epsilon must be > 0, got {epsilon}")
    if space not in ("w", "z"):
        raise MetricError(f"space must be 'w' or 'z', got {space!r}")
    g = torch.Generator().manual_seed(seed)
    values, all_w0, all_w1, all_t = [], [], [], []
    remaining = n_pairs
    with torch.no_grad():
        while remaining > 0:
            b = min(batch_size, remaining)
            z0 = torch.randn(b, generator.cfg.z_dim, generator=g, dtype=dtype)
            z1 = torch.randn(b, generator.cfg.z_dim, generator=g, dtype=dtype)
            t = torch.rand(b, 1, generator=g, dtype=dtype)
            if space == "w":
                w0 = generator.map_latent(z0)
                w1 = generator.map_latent(z1)
                wa = w0 + t * (w1 - w0)
                wb = w0 + (t + epsilon) * (w1 - w0)
            else:
                wa = generator.map_latent(_slerp(z0, z1, t))
                wb = generator.map_latent(_slerp(z0, z1, t + epsilon))
                w0, w1 = wa, wb
            ea = embedder.embed(generator.synthesize(wa)).double()
            eb = embedder.embed(generator.synthesize(wb)).double()
            d = ((ea - eb) ** 2).sum(dim=1) / (epsilon ** 2)
            values.append(d.numpy())
            all_w0.append(w0.double().numpy())
            all_w1.append(w1.double().numpy())
            all_t.append(t.squeeze(1).double().numpy())
            remaining -= b
    values = np.concatenate(values)
    return PplResult(mean=float(values.mean()), values=values,
                     w0=np.concatenate(all_w0), w1=np.concatenate(all_w1),
                     t=np.concatenate(all_t), epsilon=epsilon, space=space)


@dataclass
class PplPercentiles:
    order: np.ndarray           # pair indices sorted ascending by value (stable)
    top_indices: np.ndarray     # smallest-value decile (smoothest pairs)
    bottom_indices: np.ndarray  # largest-value decile
    bin_edges: np.ndarray
    counts: np.ndarray


def ppl_percentiles(result: PplResult, fraction: float = 0.1, bins: int = 50) -> PplPercentiles:
    """Decile split and histogram of per-pair path-length values."""
    n = result.values.shape[0]
    if n < 10:
        raise MetricError(f"need at least 10 pairs for percentile split, got {n}")
    order = np.argsort(result.values, kind="stable")  # ties break by pair index
    count = max(1, int(n * fraction))
    counts, edges = np.histogram(result.values, bins=bins)
    return PplPercentiles(order=order, top_indices=order[:count],
                          bottom_indices=order[-count:], bin_edges=edges, counts=counts)


# --------------------------------------------------------------------------
# attribute linearity

def interpolation_weights(n_steps: int) -> np.ndarray:
    """Convex weights ((N-i)/N, i/N) for i = 0..N.

    Computed from integers so a mirrored grid produces bitwise-mirrored
    weights; combined with the symmetric two-term form below this makes the
    deviation exactly invariant under endpoint swap.
    """
    i = np.arange(n_steps + 1, dtype=np.float64)
    return np.stack([(n_steps - i) / n_steps, i / n_steps], axis=1)


def als_from_scores(scores: np.ndarray, n_steps: int) -> np.ndarray:
    """Per-point squared deviation from the endpoint line.

    `scores` is (..., N+1, M); returns deviations of the same shape. Endpoint
    rows are exactly zero by construction.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[-2] != n_steps + 1:
        raise MetricError(f"expected {n_steps + 1} grid rows, got {scores.shape[-2]}")
    w = interpolation_weights(n_steps)  # (N+1, 2)
    s0 = scores[..., :1, :]
    s1 = scores[..., -1:, :]
    c0 = w[:, 0].reshape((1,) * (scores.ndim - 2) + (-1, 1))
    c1 = w[:, 1].reshape((1,) * (scores.ndim - 2) + (-1, 1))
    dev = c0 * (scores - s0) + c1 * (scores - s1)
    return dev ** 2


@dataclass
class AlsResult:
    delta_total: float          # mean deviation over N interior points and M attributes
    per_attribute: np.ndarray   # (M,)
    per_t: np.ndarray           # (N+1,) mean over attributes and pairs
    n_pairs: int
    n_steps: int
    attribute_names: tuple


def als(generator, scorers, n_pairs: int = 256, n_steps: int = 10, seed: int = 0,
        batch_size: int = 64, truncation_psi=None, w_mean=None) -> AlsResult:
    """Attribute-score deviation from linearity along latent line segments.

    Pairs are drawn without truncation by default; the divisor counts the N
    interpolation points per the metric definition (endpoints deviate by
    exactly zero and contribute nothing).
    """
    if n_steps < 2:
        raise MetricError(f"n_steps must be >= 2, got {n_steps}")
    g = torch.Generator().manual_seed(seed)
    weights = torch.from_numpy(interpolation_weights(n_steps))
    m = len(scorers.names)
    deltas = []
    remaining = n_pairs
    with torch.no_grad():
        while remaining > 0:
            b = min(batch_size, remaining)
            w0 = generator.map_latent(torch.randn(b, generator.cfg.z_dim, generator=g))
            w1 = generator.map_latent(torch.randn(b, generator.cfg.z_dim, generator=g))
            if truncation_psi is not None:
                w0 = truncate(w0, truncation_psi, w_mean)
                w1 = truncate(w1, truncation_psi, w_mean)
            scores = np.zeros((b, n_steps + 1, m))
            for i in range(n_steps + 1):
                c0 = weights[i, 0].to(w0.dtype)
                c1 = weights[i, 1].to(w0.dtype)
                wt = c0 * w0 + c1 * w1
                scores[:, i, :] = scorers.score(generator.synthesize(wt)).double().numpy()
            deltas.append(als_from_scores(scores, n_steps))
            remaining -= b
    dev = np.concatenate(deltas, axis=0)  # (n_pairs, N+1, M)
    per_attribute = dev.sum(axis=1).mean(axis=0) / n_steps
    per_t = dev.mean(axis=(0, 2))
    delta_total = float(dev.sum(axis=(1, 2)).mean() / (n_steps * m))
    return AlsResult(delta_total=delta_total, per_attribute=per_attribute, per_t=per_t,
                     n_pairs=n_pairs, n_steps=n_steps, attribute_names=tuple(scorers.names))


# --------------------------------------------------------------------------
# distribution metrics

def _sqrt_psd(mat: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    if vals.min() < -tol:
        raise MetricError(f"matrix not PSD within tolerance (min eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_from_moments(mu1, sigma1, mu2, sigma2) -> float:
    mu1, mu2 = np.asarray(mu1, dtype=np.float64), np.asarray(mu2, dtype=np.float64)
    sigma1 = np.atleast_2d(np.asarray(sigma1, dtype=np.float64))
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    if not (np.isfinite(sigma1).all() and np.isfinite(sigma2).all()
            and np.isfinite(mu1).all() and np.isfinite(mu2).all()):
        raise MetricError("non-finite moments")
    root2 = _sqrt_psd(sigma2)
    cross = _sqrt_psd(root2 @ sigma1 @ root2)
    dist = float(((mu1 - mu2) ** 2).sum() + np.trace(sigma1) + np.trace(sigma2)
                 - 2.0 * np.trace(cross))
    return max(dist, 0.0)


def moments(embeddings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    emb = np.asarray(embeddings, dtype=np.float64)
    mu = emb.mean(axis=0)
    sigma = np.cov(emb, rowvar=False)
    return mu, np.atleast_2d(sigma)


def frechet_distance(real_embeddings: np.ndarray, fake_embeddings: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two embedding sets."""
    if len(real_embeddings) < 2 or len(fake_embeddings) < 2:
        raise MetricError("need at least 2 samples per side")
    mu_r, sig_r = moments(real_embeddings)
    mu_f, sig_f = moments(fake_embeddings)
    return frechet_from_moments(mu_r, sig_r, mu_f, sig_f)


def _chunked_dists(a: np.ndarray, b: np.ndarray, chunk: int = 512):
    b_sq = (b ** 2).sum(axis=1)
    for start in range(0, a.shape[0], chunk):
        block = a[start : start + chunk]
        d2 = (block ** 2).sum(axis=1)[:, None] + b_sq[None, :] - 2.0 * block @ b.T
        yield start, np.sqrt(np.maximum(d2, 0.0))


def _knn_radii(points: np.ndarray, k: int) -> np.ndarray:
    radii = np.zeros(points.shape[0])
    for start, dists in _chunked_dists(points, points):
        # row includes the self-distance 0, so index k is the k-th neighbour
        radii[start : start + dists.shape[0]] = np.partition(dists, k, axis=1)[:, k]
    return radii


def _fraction_covered(queries: np.ndarray, points: np.ndarray, radii: np.ndarray) -> float:
    covered = 0
    for start, dists in _chunked_dists(queries, points):
        covered += int((dists <= radii[None, :]).any(axis=1).sum())
    return covered / queries.shape[0]


def precision_recall(real_embeddings: np.ndarray, fake_embeddings: np.ndarray,
                     k: int = 3) -> tuple[float, float]:
    """k-NN manifold coverage: precision for fakes, recall for reals."""
    real = np.asarray(real_embeddings, dtype=np.float64)
    fake = np.asarray(fake_embeddings, dtype=np.float64)
    if k < 1:
        raise MetricError("k must be >= 1")
    if real.shape[0] < k + 1 or fake.shape[0] < k + 1:
        raise MetricError(f"need at least k+1={k + 1} samples per side")
    precision = _fraction_covered(fake, real, _knn_radii(real, k))
    recall = _fraction_covered(real, fake, _knn_radii(fake, k))
    return precision, recall


# --------------------------------------------------------------------------
# DCI

@dataclass
class DciResult:
    disentanglement: float
    completeness: float
    informativeness: float
    importance: np.ndarray      # (Dw, M) absolute regression coefficients


def _weighted_one_minus_entropy(p: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    sums = p.sum(axis=axis, keepdims=True)
    mass = sums.squeeze(axis)
    total = mass.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        probs = np.where(sums > 0, p / np.where(sums == 0, 1.0, sums), 0.0)
        logp = np.where(probs > 0, np.log(probs), 0.0)
    entropy = -(probs * logp).sum(axis=axis) / np.log(p.shape[axis])
    scores = np.where(mass > 0, 1.0 - entropy, 0.0)  # all-zero line contributes 0
    weights = mass / total if total > 0 else np.zeros_like(mass)
    return scores, weights


def dci(w_samples: np.ndarray, factors: np.ndarray, l1_alpha: float = 1e-3,
        holdout_fraction: float = 0.2) -> DciResult:
    """Disentanglement / completeness / informativeness from L1 regressors.

    Importance is the absolute coefficient matrix of per-factor Lasso
    regressions on standardized latents; informativeness is one minus the
    holdout MSE normalized by factor variance.
    """
    w = np.asarray(w_samples, dtype=np.float64)
    y = np.asarray(factors, dtype=np.float64)
    if w.ndim != 2 or y.ndim != 2 or w.shape[0] != y.shape[0]:
        raise MetricError("w_samples and factors must be paired 2-D arrays")
    n, n_dims = w.shape
    n_factors = y.shape[1]
    n_hold = max(1, int(n * holdout_fraction))
    std = w.std(axis=0)
    x = (w - w.mean(axis=0)) / np.where(std == 0, 1.0, std)
    x_tr, x_te = x[:-n_hold], x[-n_hold:]
    y_tr, y_te = y[:-n_hold], y[-n_hold:]
    importance = np.zeros((n_dims, n_factors))
    informativeness = np.zeros(n_factors)
    for j in range(n_factors):
        reg = Lasso(alpha=l1_alpha, max_iter=10000)
        reg.fit(x_tr, y_tr[:, j])
        importance[:, j] = np.abs(reg.coef_)
        var = y_te[:, j].var()
        mse = float(((reg.predict(x_te) - y_te[:, j]) ** 2).mean())
        informativeness[j] = 1.0 - mse / var if var > 0 else 0.0
    d_scores, d_weights = _weighted_one_minus_entropy(importance, axis=1)
    c_scores, c_weights = _weighted_one_minus_entropy(importance, axis=0)
    return DciResult(
        disentanglement=float((d_scores * d_weights).sum()),
        completeness=float((c_scores * c_weights).sum()),
        informativeness=float(informativeness.mean()),
        importance=importance)


def collect_latents_and_scores(generator, scorers, n: int, seed: int,
                               batch_size: int = 128):
    """Paired (w, attribute-score) samples for latent-space analyses."""
    g = torch.Generator().manual_seed(seed)
    ws, scores = [], []
    remaining = n
    with torch.no_grad():
        while remaining > 0:
            b = min(batch_size, remaining)
            w = generator.map_latent(torch.randn(b, generator.cfg.z_dim, generator=g))
            ws.append(w.double().numpy())
            scores.append(scorers.score(generator.synthesize(w)).double().numpy())
            remaining -= b
    return np.concatenate(ws), np.concatenate(scores)


# --------------------------------------------------------------------------
# Mahalanobis worst-image ranking

def mahalanobis_rank(images: torch.Tensor, real_moments: tuple, embedder,
                     n_worst: int = 30) -> tuple[np.ndarray, np.ndarray]:
    """Rank images by Mahalanobis distance to the real embedding moments.

    Returns (indices sorted descending by distance, distances in that order),
    truncated to n_worst.
    """
    mu, sigma = real_moments
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64) + 1e-6 * np.eye(len(mu))
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise MetricError(f"covariance singular after regularization: {exc}") from exc
    emb = embed_batched(embedder, images)
    diff = emb - mu[None, :]
    solved = np.linalg.solve(chol, diff.T)
    d2 = (solved ** 2).sum(axis=0)
    order = np.argsort(-d2, kind="stable")[:n_worst]
    return order, d2[order]


# --------------------------------------------------------------------------
# attribute scorers

class AttributeScorerSet:
    """Frozen per-attribute regressors over generated or real images."""

    def __init__(self, net: ConvFactorNet, manifest: dict):
        self.net = net.eval().requires_grad_(False)
        self.manifest = dict(manifest)
        self.names = FACTOR_NAMES

    def score(self, images: torch.Tensor) -> torch.Tensor:
        """Attribute scores, one column per attribute, for images in [-1, 1]."""
        if images.shape[-1] != self.net.input_resolution:
            images = torch.nn.functional.interpolate(
                images, size=(self.net.input_resolution,) * 2,
                mode="bilinear", align_corners=False)
        with torch.no_grad():
            return self.net(images)

    def scorer(self, index: int):
        """Single-attribute view: images -> (B,) scores."""
        def fn(images):
            return self.score(images)[:, index]
        return fn


def train_attribute_scorers(archive, widths=SCORER_WIDTHS, seed: int = 0,
                            fit_kwargs: dict | None = None) -> AttributeScorerSet:
    from .generator import seeded_init
    with seeded_init(seed):
        net = ConvFactorNet(archive.spec.resolution, widths=widths)
    try:
        record = fit_factor_regressor(net, archive.images_float(), archive.factors,
                                      seed=seed, **(fit_kwargs or {}))
    except ExtractorTrainingError as exc:
        raise ScorerTrainingError(str(exc)) from exc
    manifest = {"kind": "attribute-scorers", "seed": seed, "widths": list(widths),
                "input_resolution": archive.spec.resolution, **record}
    return AttributeScorerSet(net, manifest)


def save_scorers(scorers: AttributeScorerSet, path) -> Path:
    arrays = {f"net.{k}": v.detach().numpy().astype(np.float32)
              for k, v in scorers.net.state_dict().items()}
    return save_container(path, arrays, {"manifest": scorers.manifest})


def load_scorers(path) -> AttributeScorerSet:
    arrays, meta = load_container(path)
    manifest = meta["manifest"]
    net = ConvFactorNet(manifest["input_resolution"], widths=tuple(manifest["widths"]))
    with torch.no_grad():
        for name, tensor in net.state_dict().items():
            tensor.copy_(torch.from_numpy(arrays[f"net.{name}"]).reshape(tensor.shape))
    return AttributeScorerSet(net, manifest)


# --------------------------------------------------------------------------
# reports

@dataclass
class MetricReport:
    metric: str
    values: dict
    sample_counts: dict
    seeds: dict
    config_hash: str
    manifests: dict = field(default_factory=dict)
    substitutions: tuple = SUBSTITUTIONS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["substitutions"] = list(self.substitutions)
        return d

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        return path


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj)}")


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=_json_default).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_als_table_csv(path, rows: dict[str, AlsResult]):
    """Attribute columns, one row per method."""
    names = next(iter(rows.values())).attribute_names
    with open(path, "w") as fh:
        fh.write("method," + ",".join(names) + ",mean\n")
        for method, res in rows.items():
            cells = ",".join(f"{v:.6g}" for v in res.per_attribute)
            fh.write(f"{method},{cells},{res.delta_total:.6g}\n")


def write_per_t_csv(path, result: AlsResult):
    with open(path, "w") as fh:
        fh.write("t,mean_delta\n")
        for i, v in enumerate(result.per_t):
            fh.write(f"{i / result.n_steps:.6g},{v:.6g}\n")


def write_ppl_hist_csv(path, percentiles: PplPercentiles):
    with open(path, "w") as fh:
        fh.write("bin_left,bin_right,count\n")
        for left, right, count in zip(percentiles.bin_edges[:-1], percentiles.bin_edges[1:],
                                      percentiles.counts):
            fh.write(f"{left:.6g},{right:.6g},{count}\n")
