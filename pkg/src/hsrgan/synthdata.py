"""Procedural shapes dataset with known continuous generative factors.

Each image shows a single anti-aliased ellipse (or rectangle) on a uniform
gray background. Six normalized factors in [-1, 1] drive the rendering and
double as regression targets for attribute scorers:

    size        -> radius in [0.15, 0.40] * W          (affine)
    pos_x       -> horizontal center offset, +-0.2 * W  (affine)
    pos_y       -> vertical center offset, +-0.2 * W    (affine)
    hue         -> HSV hue angle in [0, 1.8*pi]         (affine)
    elongation  -> axis ratio in [0.5, 2.0]             (log-affine)
    brightness  -> background gray in [0.1, 0.6]        (affine)

The hue span stops short of a full turn: closing the circle would make the
two extremes render identically, breaking the no-dead-factors guarantee and
making hue unlearnable near the wrap.

Rendering is a pure function of (factors, spec): same inputs, bit-identical
image. Anti-aliasing is done by supersampling and box-averaging, so factor
changes below one output pixel still move pixel coverage.
"""

from __future__ import annotations

import colorsys
import csv
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ArchiveError, ConfigError, FactorRangeError

FACTOR_NAMES = ("size", "pos_x", "pos_y", "hue", "elongation", "brightness")
FACTOR_COUNT = len(FACTOR_NAMES)

RADIUS_RANGE = (0.15, 0.40)      # fraction of image width
CENTER_OFFSET = 0.20             # max |offset| as fraction of width
HUE_SPAN = 0.9 * 2.0 * math.pi   # strictly inside [0, 2*pi)
HUE_SATURATION = 0.75
HUE_VALUE = 0.90
RATIO_RANGE = (0.5, 2.0)         # major/minor axis ratio
BACKGROUND_RANGE = (0.10, 0.60)

ARCHIVE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class FactorVector:
    """The six normalized generative factors, each in [-1, 1]."""

    size: float
    pos_x: float
    pos_y: float
    hue: float
    elongation: float
    brightness: float

    def __post_init__(self):
        for name in FACTOR_NAMES:
            v = getattr(self, name)
            if not np.isfinite(v) or not -1.0 <= v <= 1.0:
                raise FactorRangeError(f"factor {name}={v!r} outside [-1, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FACTOR_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "FactorVector":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (FACTOR_COUNT,):
            raise FactorRangeError(f"expected {FACTOR_COUNT} factors, got shape {values.shape}")
        return cls(*[float(v) for v in values])


@dataclass(frozen=True)
class DatasetSpec:
    """Parameters of a rendered archive."""

    resolution: int = 32
    sample_count: int = 1
    seed: int = 0
    shape_kind: str = "ellipse"
    supersampling: int = 4

    def __post_init__(self):
        if self.resolution < 8:
            raise ConfigError(f"resolution {self.resolution} too small")
        if self.sample_count < 0:
            raise ConfigError("sample_count must be >= 0")
        if self.supersampling < 1:
            raise ConfigError("supersampling must be >= 1")
        if self.shape_kind not in ("ellipse", "rectangle"):
            raise ConfigError(f"unknown shape_kind {self.shape_kind!r}")


@dataclass(frozen=True)
class ShapeSample:
    image: np.ndarray  # H x W x 3 float64 in [0, 1]
    factors: FactorVector


def factor_geometry(factors: FactorVector, resolution: int) -> dict:
    """Map normalized factors to rendering geometry (pixels / RGB)."""
    f = factors
    w = float(resolution)
    radius = (RADIUS_RANGE[0] + (f.size + 1.0) / 2.0 * (RADIUS_RANGE[1] - RADIUS_RANGE[0])) * w
    cx = w / 2.0 + f.pos_x * CENTER_OFFSET * w
    cy = w / 2.0 + f.pos_y * CENTER_OFFSET * w
    hue_angle = (f.hue + 1.0) / 2.0 * HUE_SPAN
    fg = colorsys.hsv_to_rgb(hue_angle / (2.0 * math.pi), HUE_SATURATION, HUE_VALUE)
    # log-affine: ratio = 2**elongation, so elongation 0 gives a circle
    ratio = math.exp(
        math.log(RATIO_RANGE[0])
        + (f.elongation + 1.0) / 2.0 * (math.log(RATIO_RANGE[1]) - math.log(RATIO_RANGE[0]))
    )
    bg = BACKGROUND_RANGE[0] + (f.brightness + 1.0) / 2.0 * (BACKGROUND_RANGE[1] - BACKGROUND_RANGE[0])
    # equal-area split keeps pixel count a function of size alone
    semi_x = radius * math.sqrt(ratio)
    semi_y = radius / math.sqrt(ratio)
    return {
        "radius": radius, "center": (cx, cy), "semi_axes": (semi_x, semi_y),
        "foreground": fg, "background": bg, "axis_ratio": ratio,
    }


def coverage_mask(factors: FactorVector, spec: DatasetSpec) -> np.ndarray:
    """Per-pixel foreground coverage in [0, 1] from supersampled membership."""
    geom = factor_geometry(factors, spec.resolution)
    s = spec.supersampling
    n = spec.resolution * s
    # subpixel centers in output-pixel units
    coords = (np.arange(n, dtype=np.float64) + 0.5) / s
    xs = coords[None, :]
    ys = coords[:, None]
    cx, cy = geom["center"]
    ax, ay = geom["semi_axes"]
    if spec.shape_kind == "ellipse":
        inside = ((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2 <= 1.0
    else:
        inside = (np.abs(xs - cx) <= ax) & (np.abs(ys - cy) <= ay)
    return inside.reshape(spec.resolution, s, spec.resolution, s).mean(axis=(1, 3))


def render_shape(factors: FactorVector, spec: DatasetSpec) -> np.ndarray:
    """Render one sample; returns an H x W x 3 float array in [0, 1]."""
    geom = factor_geometry(factors, spec.resolution)
    alpha = coverage_mask(factors, spec)[:, :, None]
    fg = np.array(geom["foreground"], dtype=np.float64)
    image = geom["background"] * (1.0 - alpha) + fg[None, None, :] * alpha
    return np.clip(image, 0.0, 1.0)


def sample_factors(rng: np.random.Generator) -> FactorVector:
    """Draw one factor vector, each component i.i.d. uniform on [-1, 1]."""
    return FactorVector.from_array(rng.uniform(-1.0, 1.0, size=FACTOR_COUNT))


def quantize_image(image: np.ndarray) -> np.ndarray:
    """Quantize a float [0, 1] image to the uint8 values stored on disk."""
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def _sample_rngs(spec: DatasetSpec):
    # per-sample substreams: parallel generation matches serial generation
    return [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(spec.sample_count)]


def generate_dataset(spec: DatasetSpec, out_dir) -> Path:
    """Render an archive: images/ of PNGs, factors.csv, spec.json."""
    out_dir = Path(out_dir)
    try:
        image_dir = out_dir / "images"
        image_dir.mkdir(parents=True, exist_ok=True)
        factor_rows = []
        for i, rng in enumerate(_sample_rngs(spec)):
            factors = sample_factors(rng)
            image = quantize_image(render_shape(factors, spec))
            Image.fromarray(image, mode="RGB").save(image_dir / f"{i:06d}.png", optimize=False)
            factor_rows.append(factors)
        with open(out_dir / "factors.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(FACTOR_NAMES)
            for factors in factor_rows:
                writer.writerow([repr(v) for v in factors.as_array().tolist()])
        with open(out_dir / "spec.json", "w") as fh:
            json.dump({"format_version": ARCHIVE_FORMAT_VERSION, **asdict(spec)}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise ArchiveError(f"failed to write dataset archive at {out_dir}: {exc}") from exc
    return out_dir


class DatasetArchive:
    """In-memory view of a generated archive."""

    def __init__(self, spec: DatasetSpec, images: np.ndarray, factors: np.ndarray):
        self.spec = spec
        self.images = images    # N x H x W x 3 uint8
        self.factors = factors  # N x 6 float64

    def __len__(self):
        return self.images.shape[0]

    def images_float(self) -> np.ndarray:
        """Images as float32 in [0, 1]."""
        return self.images.astype(np.float32) / 255.0


def load_dataset(archive_dir) -> DatasetArchive:
    archive_dir = Path(archive_dir)
    spec_path = archive_dir / "spec.json"
    if not spec_path.exists():
        raise ArchiveError(f"no dataset archive at {archive_dir} (missing spec.json)")
    try:
        with open(spec_path) as fh:
            payload = json.load(fh)
        version = payload.pop("format_version", None)
        if version != ARCHIVE_FORMAT_VERSION:
            raise ArchiveError(f"unsupported archive format_version {version!r}")
        spec = DatasetSpec(**payload)
        with open(archive_dir / "factors.csv", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != FACTOR_NAMES:
                raise ArchiveError(f"unexpected factor columns {header}")
            factors = np.array([[float(v) for v in row] for row in reader], dtype=np.float64)
        factors = factors.reshape(-1, FACTOR_COUNT)
        images = np.zeros((len(factors), spec.resolution, spec.resolution, 3), dtype=np.uint8)
        for i in range(len(factors)):
            with Image.open(archive_dir / "images" / f"{i:06d}.png") as img:
                images[i] = np.asarray(img.convert("RGB"))
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        if isinstance(exc, ArchiveError):
            raise
        raise ArchiveError(f"failed to read dataset archive at {archive_dir}: {exc}") from exc
    return DatasetArchive(spec, images, factors)
