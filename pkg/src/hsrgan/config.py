"""Run configuration: one JSON document covering every pipeline stage.

The schema is derived from the dataclasses that each stage consumes, so the
resolved document always round-trips. Unknown keys are rejected; every
command writes its fully resolved config (defaults expanded) next to its
outputs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .discriminator import AugmentConfig
from .errors import SchemaError
from .generator import SynthesisConfig
from .hsr import HSRConfig
from .regularize import PLRConfig, R1Config
from .synthdata import DatasetSpec
from .trainloop import TrainConfig

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class FitParams:
    val_count: int = 1000
    batch_size: int = 64
    lr: float = 2e-3
    max_epochs: int = 60
    target_mse: float = 0.02


@dataclass(frozen=True)
class ScorerConfig:
    widths: tuple = (16, 32, 64, 128)
    seed: int = 0
    fit: FitParams = field(default_factory=FitParams)


@dataclass(frozen=True)
class ExtractorConfig:
    kind: str = "trained"
    widths: tuple = (24, 48, 96, 192)
    seed: int = 0
    fit: FitParams = field(default_factory=FitParams)


@dataclass(frozen=True)
class MetricParams:
    seed: int = 0
    ppl_pairs: int = 10000
    ppl_epsilon: float = 1e-4
    ppl_space: str = "w"
    als_pairs: int = 256
    als_steps: int = 10
    als_truncation_psi: float = 0.0  # 0 -> no truncation
    pr_samples: int = 1024
    pr_k: int = 3
    dci_samples: int = 2000
    fid_samples: int = 2048
    mahalanobis_samples: int = 1024
    mahalanobis_worst: int = 30
    projection_steps: int = 400
    projection_lr: float = 0.05


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    out_dir: str = "runs/default"
    dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec(sample_count=20000))
    model: SynthesisConfig = field(default_factory=SynthesisConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricParams = field(default_factory=MetricParams)
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)


_LEAF_TYPES = (int, float, str, bool)


def _build_dataclass(cls, payload: dict, path: str):
    if not isinstance(payload, dict):
        raise SchemaError(f"{path or 'config'}: expected an object, got {type(payload).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(payload) - set(fields)
    if unknown:
        raise SchemaError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, f in fields.items():
        if name not in payload:
            continue
        value = payload[name]
        key = f"{path}.{name}" if path else name
        if isinstance(value, dict):
            target = _NESTED.get((cls.__name__, name))
            if target is None:
                raise SchemaError(f"{key}: unexpected object value")
            kwargs[name] = _build_dataclass(target, value, key)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        elif isinstance(value, _LEAF_TYPES) or value is None:
            kwargs[name] = value
        else:
            raise SchemaError(f"{key}: unsupported value type {type(value).__name__}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{path or 'config'}: {exc}") from exc


_NESTED = {
    ("RunConfig", "dataset"): DatasetSpec,
    ("RunConfig", "model"): SynthesisConfig,
    ("RunConfig", "train"): TrainConfig,
    ("RunConfig", "metrics"): MetricParams,
    ("RunConfig", "scorer"): ScorerConfig,
    ("RunConfig", "extractor"): ExtractorConfig,
    ("TrainConfig", "hsr"): HSRConfig,
    ("TrainConfig", "plr"): PLRConfig,
    ("TrainConfig", "r1"): R1Config,
    ("TrainConfig", "augment"): AugmentConfig,
    ("ScorerConfig", "fit"): FitParams,
    ("ExtractorConfig", "fit"): FitParams,
}


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config is not valid JSON: {exc}") from exc
    version = payload.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {version!r}")
    return _build_dataclass(RunConfig, payload, "")


def resolved_dict(cfg: RunConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def write_resolved(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(resolved_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Override every stage seed coherently (the --seed flag)."""
    return dataclasses.replace(
        cfg,
        dataset=dataclasses.replace(cfg.dataset, seed=seed),
        train=dataclasses.replace(cfg.train, seed=seed),
        metrics=dataclasses.replace(cfg.metrics, seed=seed),
        scorer=dataclasses.replace(cfg.scorer, seed=seed),
        extractor=dataclasses.replace(cfg.extractor, seed=seed),
    )
