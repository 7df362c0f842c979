"""Command-line surface: data generation, training, evaluation, editing,
interpolation grids, and report plots.

Every command takes `--config PATH` (a single JSON document), plus `--seed N`
to override all stage seeds, `--out DIR` to override the output directory,
and `--overwrite`. Commands hold an exclusive lock file in the run directory
and write their fully resolved config next to their outputs.

Exit codes: 0 success, 1 unexpected failure, 2 config/schema violation,
3 missing input artifact, 4 checkpoint-hash mismatch, 5 output exists
(no --overwrite), 6 run directory locked. Failures print a one-line JSON
error object to stdout.

The environment variable HSRGAN_THREADS caps worker threads.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import shutil
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from . import edit as edit_mod
from . import metrics as metrics_mod
from . import trainloop
from .errors import (ArtifactMissingError, ConfigError, HashMismatchError, HsrganError,
                     LockHeldError, OutputExistsError, SchemaError)
from .generator import Generator, images_to_uint8
from .hsr import build_extractor, load_extractor, save_extractor
from .synthdata import generate_dataset, load_dataset

EXIT_CODES = {
    SchemaError: 2,
    ConfigError: 2,
    ArtifactMissingError: 3,
    FileNotFoundError: 3,
    HashMismatchError: 4,
    OutputExistsError: 5,
    LockHeldError: 6,
}

METRIC_NAMES = ("ppl", "als", "fid", "pr", "dci", "mahalanobis")


def _apply_thread_cap():
    cap = os.environ.get("HSRGAN_THREADS")
    if cap:
        torch.set_num_threads(max(1, int(cap)))


@contextlib.contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock_path = run_dir / ".lock"
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockHeldError(f"run directory {run_dir} is locked ({lock_path} exists)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock_path.unlink(missing_ok=True)


def _ensure_fresh(path: Path, overwrite: bool):
    exists = path.is_file() or (path.is_dir() and any(path.iterdir()))
    if exists:
        if not overwrite:
            raise OutputExistsError(f"output {path} exists; pass --overwrite to replace it")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()


def _load_config(args) -> config_mod.RunConfig:
    if not Path(args.config).exists():
        raise ArtifactMissingError(f"config file {args.config} not found")
    cfg = config_mod.load_run_config(args.config)
    if args.seed is not None:
        cfg = config_mod.with_seed(cfg, args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise ArtifactMissingError(f"{what} not found at {path}")
    return Path(path)


def _dataset_dir(cfg, args) -> Path:
    return _require(Path(args.data) if getattr(args, "data", None) else
                    Path(cfg.out_dir) / "dataset", "dataset archive")


def _extractor_path(cfg, args) -> Path:
    return _require(Path(args.extractor) if getattr(args, "extractor", None) else
                    Path(cfg.out_dir) / "extractor.ckpt", "extractor checkpoint")


def _scorers_path(cfg, args) -> Path:
    return _require(Path(args.scorers) if getattr(args, "scorers", None) else
                    Path(cfg.out_dir) / "scorers.ckpt", "attribute scorers checkpoint")


def _checkpoint_path(cfg, args) -> Path:
    return _require(Path(args.checkpoint) if getattr(args, "checkpoint", None) else
                    Path(cfg.out_dir) / "train" / "checkpoints" / "last.ckpt",
                    "generator checkpoint")


# --------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir) / "dataset"
    with run_lock(Path(cfg.out_dir)):
        _ensure_fresh(out, args.overwrite)
        config_mod.write_resolved(cfg, Path(cfg.out_dir) / "config.gen-data.json")
        generate_dataset(cfg.dataset, out)
    print(json.dumps({"command": "gen-data", "out": str(out),
                      "samples": cfg.dataset.sample_count}))
    return 0


def cmd_train_scorer(args) -> int:
    cfg = _load_config(args)
    with run_lock(Path(cfg.out_dir)):
        archive = load_dataset(_dataset_dir(cfg, args))
        out = Path(cfg.out_dir) / "scorers.ckpt"
        _ensure_fresh(out, args.overwrite)
        config_mod.write_resolved(cfg, Path(cfg.out_dir) / "config.train-scorer.json")
        scorers = metrics_mod.train_attribute_scorers(
            archive, widths=cfg.scorer.widths, seed=cfg.scorer.seed,
            fit_kwargs=asdict(cfg.scorer.fit))
        metrics_mod.save_scorers(scorers, out)
        with open(Path(cfg.out_dir) / "scorers.json", "w") as fh:
            json.dump(scorers.manifest, fh, indent=2, sort_keys=True)
    print(json.dumps({"command": "train-scorer", "out": str(out),
                      "per_factor_mse": scorers.manifest.get("per_factor_mse")}))
    return 0


def cmd_train_extractor(args) -> int:
    cfg = _load_config(args)
    with run_lock(Path(cfg.out_dir)):
        out = Path(cfg.out_dir) / "extractor.ckpt"
        _ensure_fresh(out, args.overwrite)
        config_mod.write_resolved(cfg, Path(cfg.out_dir) / "config.train-extractor.json")
        archive = None
        if cfg.extractor.kind == "trained":
            archive = load_dataset(_dataset_dir(cfg, args))
        extractor = build_extractor(
            cfg.extractor.kind, archive=archive,
            input_resolution=cfg.dataset.resolution, widths=cfg.extractor.widths,
            seed=cfg.extractor.seed, fit_kwargs=asdict(cfg.extractor.fit))
        save_extractor(extractor, out)
        with open(Path(cfg.out_dir) / "extractor.json", "w") as fh:
            json.dump(extractor.manifest, fh, indent=2, sort_keys=True)
    print(json.dumps({"command": "train-extractor", "out": str(out),
                      "kind": cfg.extractor.kind}))
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    with run_lock(Path(cfg.out_dir)):
        data_dir = _dataset_dir(cfg, args)
        extractor = None
        if cfg.train.enable_hsr or not args.no_eval_metrics:
            extractor = load_extractor(_extractor_path(cfg, args))
        config_mod.write_resolved(cfg, Path(cfg.out_dir) / "config.train.json")
        if args.table4_grid:
            out = Path(cfg.out_dir) / "grid"
            if args.resume:
                raise SchemaError("--resume cannot be combined with --table4-grid")
            _ensure_fresh(out, args.overwrite)
            seeds = tuple(int(s) for s in args.grid_seeds.split(","))
            runs = trainloop.run_table4_grid(data_dir, out, cfg.train, cfg.model,
                                             extractor, seeds=seeds)
            print(json.dumps({"command": "train", "grid": runs}))
            return 0
        out = Path(cfg.out_dir) / "train"
        if not args.resume:
            _ensure_fresh(out, args.overwrite)
        final = trainloop.run_training(data_dir, out, cfg.train, cfg.model,
                                       extractor=extractor, resume_from=args.resume)
        print(json.dumps({"command": "train", "checkpoint": str(final)}))
    return 0


def _metric_report(cfg, metric, values, counts, manifests):
    return metrics_mod.MetricReport(
        metric=metric, values=values, sample_counts=counts,
        seeds={"metrics": cfg.metrics.seed},
        config_hash=metrics_mod.config_hash(config_mod.resolved_dict(cfg)),
        manifests=manifests)


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    requested = [m for m in (args.metrics or "").split(",") if m]
    if not requested:
        raise SchemaError("eval requires a non-empty --metrics list")
    unknown = set(requested) - set(METRIC_NAMES)
    if unknown:
        raise SchemaError(f"unknown metrics {sorted(unknown)}; choose from {METRIC_NAMES}")
    mp = cfg.metrics
    with run_lock(Path(cfg.out_dir)):
        ckpt = _checkpoint_path(cfg, args)
        gen, _, _ = trainloop.build_generator_from_checkpoint(ckpt)
        extractor = load_extractor(_extractor_path(cfg, args))
        out = Path(cfg.out_dir) / "eval"
        out.mkdir(parents=True, exist_ok=True)
        config_mod.write_resolved(cfg, Path(cfg.out_dir) / "config.eval.json")
        manifests = {"embedder": extractor.manifest, "checkpoint": str(ckpt)}
        results = {}

        real_emb = None
        if {"fid", "pr", "mahalanobis"} & set(requested):
            archive = load_dataset(_dataset_dir(cfg, args))
            real_images = torch.from_numpy(archive.images).permute(0, 3, 1, 2).float() / 127.5 - 1.0
            real_emb = metrics_mod.embed_batched(extractor, real_images[:mp.fid_samples])

        if "ppl" in requested:
            res = metrics_mod.ppl(gen, extractor, n_pairs=mp.ppl_pairs,
                                  epsilon=mp.ppl_epsilon, space=mp.ppl_space, seed=mp.seed)
            pct = metrics_mod.ppl_percentiles(res)
            metrics_mod.write_ppl_hist_csv(out / "ppl_hist.csv", pct)
            np.savez(out / "ppl_pairs.npz", values=res.values, w0=res.w0, w1=res.w1, t=res.t)
            bottom_mean = float(res.values[pct.bottom_indices].mean())
            results["ppl"] = {"mean": res.mean, "bottom_decile_mean": bottom_mean,
                              "top_decile_mean": float(res.values[pct.top_indices].mean())}
            _metric_report(cfg, "ppl", results["ppl"],
                           {"n_pairs": mp.ppl_pairs}, manifests).save(out / "report-ppl.json")

        if "als" in requested or "dci" in requested:
            scorers = metrics_mod.load_scorers(_scorers_path(cfg, args))
            manifests["scorers"] = scorers.manifest

        if "als" in requested:
            psi = mp.als_truncation_psi or None
            w_mean = gen.mean_style(seed=mp.seed) if psi else None
            res = metrics_mod.als(gen, scorers, n_pairs=mp.als_pairs, n_steps=mp.als_steps,
                                  seed=mp.seed, truncation_psi=psi, w_mean=w_mean)
            metrics_mod.write_als_table_csv(out / "als_table.csv", {"run": res})
            metrics_mod.write_per_t_csv(out / "als_per_t.csv", res)
            results["als"] = {"mean": res.delta_total,
                              "per_attribute": dict(zip(res.attribute_names,
                                                        res.per_attribute.tolist())),
                              "per_t": res.per_t.tolist()}
            _metric_report(cfg, "als", results["als"],
                           {"n_pairs": mp.als_pairs, "n_steps": mp.als_steps},
                           manifests).save(out / "report-als.json")

        if "fid" in requested:
            fake_emb = metrics_mod.generator_embeddings(gen, extractor, mp.fid_samples,
                                                        seed=mp.seed + 1)
            results["fid"] = {"fid_proxy": metrics_mod.frechet_distance(real_emb, fake_emb)}
            _metric_report(cfg, "fid", results["fid"],
                           {"real": int(real_emb.shape[0]), "fake": mp.fid_samples},
                           manifests).save(out / "report-fid.json")

        if "pr" in requested:
            fake_emb = metrics_mod.generator_embeddings(gen, extractor, mp.pr_samples,
                                                        seed=mp.seed + 2)
            precision, recall = metrics_mod.precision_recall(real_emb[:mp.pr_samples],
                                                             fake_emb, k=mp.pr_k)
            results["pr"] = {"precision": precision, "recall": recall, "k": mp.pr_k}
            _metric_report(cfg, "pr", results["pr"],
                           {"real": int(min(mp.pr_samples, real_emb.shape[0])),
                            "fake": mp.pr_samples}, manifests).save(out / "report-pr.json")

        if "dci" in requested:
            w_samples, scores = metrics_mod.collect_latents_and_scores(
                gen, scorers, mp.dci_samples, seed=mp.seed + 3)
            res = metrics_mod.dci(w_samples, scores)
            results["dci"] = {"disentanglement": res.disentanglement,
                              "completeness": res.completeness,
                              "informativeness": res.informativeness}
            _metric_report(cfg, "dci", results["dci"], {"n": mp.dci_samples},
                           manifests).save(out / "report-dci.json")

        if "mahalanobis" in requested:
            mu, sigma = metrics_mod.moments(real_emb)
            images = torch.cat(list(metrics_mod.sample_images(
                gen, mp.mahalanobis_samples, mp.seed + 4)))
            order, dists = metrics_mod.mahalanobis_rank(
                images, (mu, sigma), extractor, n_worst=mp.mahalanobis_worst)
            gallery = images_to_uint8(images[torch.from_numpy(order.copy())]).numpy()
            strip = np.concatenate(list(gallery), axis=1)
            _save_png(strip, out / "mahalanobis_worst.png")
            results["mahalanobis"] = {"worst_distances": dists.tolist()}
            _metric_report(cfg, "mahalanobis", results["mahalanobis"],
                           {"n": mp.mahalanobis_samples}, manifests).save(
                               out / "report-mahalanobis.json")

    print(json.dumps({"command": "eval", "out": str(out), "results": results},
                     default=lambda o: float(o) if isinstance(o, np.floating) else str(o)))
    return 0


def _save_png(array_u8: np.ndarray, path: Path):
    from PIL import Image
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array_u8, mode="RGB").save(path)


def cmd_edit(args) -> int:
    cfg = _load_config(args)
    mp = cfg.metrics
    with run_lock(Path(cfg.out_dir)):
        ckpt = _checkpoint_path(cfg, args)
        gen, _, _ = trainloop.build_generator_from_checkpoint(ckpt)
        extractor = load_extractor(_extractor_path(cfg, args))
        scorers = metrics_mod.load_scorers(_scorers_path(cfg, args))
        if args.attribute not in scorers.names:
            raise SchemaError(f"unknown attribute {args.attribute!r}; "
                              f"choose from {list(scorers.names)}")
        attr_index = list(scorers.names).index(args.attribute)
        out = Path(cfg.out_dir) / "edit"
        out.mkdir(parents=True, exist_ok=True)
        config_mod.write_resolved(cfg, Path(cfg.out_dir) / "config.edit.json")
        ckpt_hash = edit_mod.file_hash(ckpt)

        direction_path = out / f"direction-{args.attribute}.json"
        if args.direction:
            direction = edit_mod.EditDirection.load(
                _require(args.direction, "direction file"),
                expect_checkpoint_hash=ckpt_hash, allow_mismatch=args.allow_hash_mismatch)
        elif direction_path.exists():
            direction = edit_mod.EditDirection.load(
                direction_path, expect_checkpoint_hash=ckpt_hash,
                allow_mismatch=args.allow_hash_mismatch)
        else:
            direction = edit_mod.find_direction(
                gen, scorers.scorer(attr_index), attribute=args.attribute,
                n_samples=args.direction_samples, seed=mp.seed, checkpoint_hash=ckpt_hash)
            direction.save(direction_path)

        sigma = direction.diagnostics.get("sigma_w") or edit_mod.style_std(gen, seed=mp.seed)
        if args.image:
            from PIL import Image
            with Image.open(_require(args.image, "input image")) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32)
            image = torch.from_numpy(arr).permute(2, 0, 1)[None] / 127.5 - 1.0
        else:
            g = torch.Generator().manual_seed(mp.seed + 5)
            with torch.no_grad():
                image = gen.synthesize(gen.map_latent(torch.randn(1, gen.cfg.z_dim, generator=g)))
        result = edit_mod.edit_linearity_eval(
            image, direction, args.alpha * sigma, scorers, gen, extractor,
            n_steps=mp.als_steps,
            project_kwargs={"steps": mp.projection_steps, "lr": mp.projection_lr})
        edit_mod.write_score_matrix_csv(out / f"linearity-{args.attribute}.csv",
                                        result["scores"], mp.als_steps, scorers.names)
        w_pair = torch.stack([result["projection_source"].w_plus[0],
                              result["projection_edited"].w_plus[0]])
        grid = edit_mod.interpolate_grid(w_pair[None], mp.als_steps, gen)[0]
        _save_png(grid, out / f"edit-{args.attribute}.png")
    print(json.dumps({"command": "edit", "attribute": args.attribute,
                      "alpha": args.alpha, "mean_deviation": result["mean_deviation"],
                      "out": str(out)}))
    return 0


def cmd_interpolate(args) -> int:
    cfg = _load_config(args)
    mp = cfg.metrics
    with run_lock(Path(cfg.out_dir)):
        ckpt = _checkpoint_path(cfg, args)
        gen, _, _ = trainloop.build_generator_from_checkpoint(ckpt)
        out = Path(cfg.out_dir) / "interpolate"
        out.mkdir(parents=True, exist_ok=True)
        config_mod.write_resolved(cfg, Path(cfg.out_dir) / "config.interpolate.json")
        pairs = []
        if args.mode == "random":
            g = torch.Generator().manual_seed(mp.seed + 6)
            with torch.no_grad():
                for _ in range(args.count):
                    w = gen.map_latent(torch.randn(2, gen.cfg.z_dim, generator=g))
                    pairs.append(w)
        elif args.mode in ("percentile-top", "percentile-bottom"):
            extractor = load_extractor(_extractor_path(cfg, args))
            res = metrics_mod.ppl(gen, extractor, n_pairs=min(mp.ppl_pairs, 2000),
                                  epsilon=mp.ppl_epsilon, seed=mp.seed)
            pct = metrics_mod.ppl_percentiles(res)
            idx = pct.top_indices if args.mode == "percentile-top" else pct.bottom_indices
            for i in idx[: args.count]:
                pairs.append(torch.from_numpy(np.stack([res.w0[i], res.w1[i]])).float())
        else:  # projected
            extractor = load_extractor(_extractor_path(cfg, args))
            archive = load_dataset(_dataset_dir(cfg, args))
            need = 2 * args.count
            if len(archive) < need:
                raise SchemaError(f"projected mode needs {need} dataset images")
            images = torch.from_numpy(archive.images[:need]).permute(0, 3, 1, 2).float() / 127.5 - 1.0
            proj = edit_mod.project_image(images, gen, extractor,
                                          steps=mp.projection_steps, lr=mp.projection_lr)
            for i in range(args.count):
                pairs.append(proj.w_plus[2 * i : 2 * i + 2])
        grids = edit_mod.interpolate_grid(torch.stack(pairs), args.steps, gen)
        for i, grid in enumerate(grids):
            _save_png(grid, out / f"{args.mode}-{i:03d}.png")
    print(json.dumps({"command": "interpolate", "mode": args.mode,
                      "grids": len(grids), "out": str(out)}))
    return 0


def cmd_report(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cfg = _load_config(args)
    run_dir = Path(args.run) if args.run else Path(cfg.out_dir)
    _require(run_dir, "run directory")
    out = Path(cfg.out_dir) / "report"
    with run_lock(Path(cfg.out_dir)):
        out.mkdir(parents=True, exist_ok=True)
        produced = []

        hist_csvs = sorted(run_dir.glob("**/eval/ppl_hist.csv"))
        if hist_csvs:
            fig, ax = plt.subplots(figsize=(6, 4))
            for path in hist_csvs:
                rows = np.loadtxt(path, delimiter=",", skiprows=1)
                label = path.parent.parent.name
                ax.stairs(rows[:, 2], np.append(rows[:, 0], rows[-1, 1]), label=label)
            ax.set_xlabel("path length value")
            ax.set_ylabel("pairs")
            ax.legend(fontsize=7)
            fig.tight_layout()
            fig.savefig(out / "ppl_hist.png", dpi=120)
            plt.close(fig)
            produced.append("ppl_hist.png")

        per_t_csvs = sorted(run_dir.glob("**/eval/als_per_t.csv"))
        if per_t_csvs:
            fig, ax = plt.subplots(figsize=(6, 4))
            for path in per_t_csvs:
                rows = np.loadtxt(path, delimiter=",", skiprows=1)
                ax.plot(rows[:, 0], rows[:, 1], marker="o", label=path.parent.parent.name)
            ax.set_xlabel("t")
            ax.set_ylabel("mean squared deviation")
            ax.legend(fontsize=7)
            fig.tight_layout()
            fig.savefig(out / "als_per_t.png", dpi=120)
            plt.close(fig)
            produced.append("als_per_t.png")

        linearity_csvs = sorted(run_dir.glob("**/edit/linearity-*.csv"))
        for path in linearity_csvs:
            attr = path.stem.replace("linearity-", "")
            scores = {}
            with open(path) as fh:
                next(fh)
                for line in fh:
                    t, name, score = line.strip().split(",")
                    scores.setdefault(name, []).append((float(t), float(score)))
            fig, ax = plt.subplots(figsize=(6, 4))
            for name, points in scores.items():
                pts = np.array(points)
                ax.plot(pts[:, 0], pts[:, 1], marker=".", label=name,
                        linewidth=2 if name == attr else 0.8)
            ax.set_xlabel("t")
            ax.set_ylabel("attribute score")
            ax.legend(fontsize=7)
            fig.tight_layout()
            fig.savefig(out / f"linearity-{attr}.png", dpi=120)
            plt.close(fig)
            produced.append(f"linearity-{attr}.png")

        summary = _grid_summary(run_dir)
        if summary:
            with open(out / "summary.csv", "w") as fh:
                fh.write("plr,hsr,fid_proxy,ppl\n")
                for row in summary:
                    fh.write(f"{row['plr']},{row['hsr']},{row['fid_proxy']:.6g},{row['ppl']:.6g}\n")
            produced.append("summary.csv")

        if not produced:
            raise ArtifactMissingError(f"no evaluation artifacts found under {run_dir}")
    print(json.dumps({"command": "report", "out": str(out), "produced": produced}))
    return 0


def _grid_summary(run_dir: Path) -> list[dict]:
    cells = {}
    for report in sorted(run_dir.glob("**/plr*_hsr*_seed*/eval/report-ppl.json")):
        cell_dir = report.parent.parent
        name = cell_dir.name
        plr, hsr = int(name[3]), int(name[8])
        with open(report) as fh:
            ppl_val = json.load(fh)["values"]["mean"]
        fid_path = cell_dir / "eval" / "report-fid.json"
        fid_val = np.nan
        if fid_path.exists():
            with open(fid_path) as fh:
                fid_val = json.load(fh)["values"]["fid_proxy"]
        cells.setdefault((plr, hsr), []).append((fid_val, ppl_val))
    rows = []
    for (plr, hsr), vals in sorted(cells.items()):
        arr = np.array(vals, dtype=np.float64)
        rows.append({"plr": plr, "hsr": hsr,
                     "fid_proxy": float(np.nanmedian(arr[:, 0])),
                     "ppl": float(np.median(arr[:, 1]))})
    return rows


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hsrgan", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--seed", type=int, default=None, help="override all stage seeds")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("gen-data", help="render the labeled shapes archive")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-scorer", help="fit frozen attribute scorers")
    common(p)
    p.add_argument("--data", help="dataset archive (default <out>/dataset)")
    p.set_defaults(func=cmd_train_scorer)

    p = sub.add_parser("train-extractor", help="build the frozen feature extractor")
    common(p)
    p.add_argument("--data", help="dataset archive (default <out>/dataset)")
    p.set_defaults(func=cmd_train_extractor)

    p = sub.add_parser("train", help="adversarial training run")
    common(p)
    p.add_argument("--data", help="dataset archive (default <out>/dataset)")
    p.add_argument("--extractor", help="extractor checkpoint (default <out>/extractor.ckpt)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--table4-grid", action="store_true", dest="table4_grid",
                   help="run the 2x2 regularizer grid instead of a single run")
    p.add_argument("--grid-seeds", default="0,1,2")
    p.add_argument("--no-eval-metrics", action="store_true",
                   help="skip quick metric evaluation at checkpoints")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compute metric reports for a checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--extractor")
    p.add_argument("--scorers")
    p.add_argument("--metrics", default="", help=f"comma list from {METRIC_NAMES}")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("edit", help="apply an attribute edit and measure linearity")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--extractor")
    p.add_argument("--scorers")
    p.add_argument("--attribute", required=True)
    p.add_argument("--alpha", type=float, default=2.0, help="edit strength in style-std units")
    p.add_argument("--image", help="image to edit (default: a generated sample)")
    p.add_argument("--direction", help="direction JSON (default: fit and cache)")
    p.add_argument("--direction-samples", type=int, default=10000)
    p.add_argument("--allow-hash-mismatch", action="store_true")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("interpolate", help="render latent interpolation strips")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--extractor")
    p.add_argument("--data")
    p.add_argument("--mode", choices=("random", "percentile-top", "percentile-bottom",
                                      "projected"), default="random")
    p.add_argument("--count", type=int, default=4, help="number of pairs")
    p.add_argument("--steps", type=int, default=10, help="interpolation steps per strip")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("report", help="emit plots and the grid summary table")
    common(p)
    p.add_argument("--run", help="directory to scan (default: --out)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except HsrganError as exc:
        code = next((c for t, c in EXIT_CODES.items() if isinstance(exc, t)), 1)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc),
                          "exit_code": code}))
        return code
    except FileNotFoundError as exc:
        print(json.dumps({"error": "FileNotFoundError", "message": str(exc), "exit_code": 3}))
        return 3


if __name__ == "__main__":
    sys.exit(main())
