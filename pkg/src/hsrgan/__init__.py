"""Desk-scale style-based GAN lab: hierarchical feature regularization during
training plus a latent-space evaluation suite (path length, attribute
linearity, distribution metrics, editing, inversion) over a procedural
shapes dataset with known factors."""

from .synthdata import DatasetSpec, FactorVector, generate_dataset, load_dataset, render_shape
from .generator import Generator, SynthesisConfig, truncate
from .discriminator import AugmentConfig, Discriminator, augment
from .hsr import HSRConfig, HsrRegularizer, build_extractor, load_extractor, save_extractor
from .regularize import PLRConfig, R1Config, path_length_penalty, r1_penalty
from .trainloop import TrainConfig, run_training, run_table4_grid, train_step
from . import metrics
from . import edit

__all__ = [
    "DatasetSpec", "FactorVector", "generate_dataset", "load_dataset", "render_shape",
    "Generator", "SynthesisConfig", "truncate",
    "AugmentConfig", "Discriminator", "augment",
    "HSRConfig", "HsrRegularizer", "build_extractor", "load_extractor", "save_extractor",
    "PLRConfig", "R1Config", "path_length_penalty", "r1_penalty",
    "TrainConfig", "run_training", "run_table4_grid", "train_step",
    "metrics", "edit",
]

__version__ = "0.1.0"
