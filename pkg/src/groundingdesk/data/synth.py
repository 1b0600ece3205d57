"""Toy detection data: flat backgrounds with solid, non-overlapping rectangles.

A rectangle's color is a fixed function of its category, so the mapping is
learnable from pixels alone and the ground truth is exact.
"""

from __future__ import annotations

import colorsys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, GenerationError
from .samples import GroundingSample, Instance

BACKGROUND = 0.5
MAX_TRIES = 500


@dataclass
class SynthSpec:
    n_images: int = 4
    n_categories: int = 2
    boxes_per_image: int = 2
    image_size: int = 32
    seed: int = 0
    min_box: int = 6
    max_box: int = 14

    def __post_init__(self):
        if self.n_images < 1 or self.n_categories < 1 or self.boxes_per_image < 0:
            raise ConfigError("need n_images >= 1, n_categories >= 1 and boxes_per_image >= 0")
        if not 1 <= self.min_box <= self.max_box <= self.image_size:
            raise ConfigError("box size bounds must satisfy 1 <= min_box <= max_box <= image_size")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthDataset:
    spec: SynthSpec
    categories: list[str]
    samples: list[GroundingSample]
    pixels: dict = field(default_factory=dict)  # image_id -> float64 [3, H, W]


def category_color(k: int) -> np.ndarray:
    """Saturated color for category ``k``; hues spread by the golden ratio."""
    hue = (k * 0.6180339887498949) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.9, 0.95 if k % 2 == 0 else 0.7))


def category_names(n: int) -> list[str]:
    return [f"shape{k}" for k in range(n)]


def _overlaps(box, placed) -> bool:
    x1, y1, x2, y2 = box
    return any(x1 < b[2] and b[0] < x2 and y1 < b[3] and b[1] < y2 for b in placed)


def synth_generate(spec: SynthSpec | dict) -> SynthDataset:
    """Deterministic dataset for ``spec``; raises GenerationError when boxes do not fit."""
    if isinstance(spec, dict):
        spec = SynthSpec(**spec)
    S = spec.image_size
    if spec.boxes_per_image * spec.min_box**2 > S * S:
        raise GenerationError(f"{spec.boxes_per_image} boxes of side >= {spec.min_box} cannot fit in {S}x{S}")
    rng = np.random.default_rng(spec.seed)
    names = category_names(spec.n_categories)
    samples, pixels = [], {}
    for image_id in range(spec.n_images):
        img = np.full((3, S, S), BACKGROUND)
        placed, instances = [], []
        for _ in range(spec.boxes_per_image):
            for _ in range(MAX_TRIES):
                w, h = rng.integers(spec.min_box, spec.max_box + 1, size=2)
                x1 = int(rng.integers(0, S - w + 1))
                y1 = int(rng.integers(0, S - h + 1))
                box = (x1, y1, x1 + int(w), y1 + int(h))
                if not _overlaps(box, placed):
                    break
            else:
                raise GenerationError(
                    f"image {image_id}: could not place {spec.boxes_per_image} non-overlapping boxes")
            cat = int(rng.integers(spec.n_categories))
            placed.append(box)
            img[:, box[1]:box[3], box[0]:box[2]] = category_color(cat)[:, None, None]
            instances.append(Instance(tuple(float(v) for v in box), category_id=cat))
        samples.append(GroundingSample(image_id, S, S, "OVD", categories=list(names), instances=instances,
                                       image=f"images/{image_id}.npy"))
        pixels[image_id] = img
    return SynthDataset(spec, names, samples, pixels)


def save_pixels(root: str | Path, samples, pixels: dict) -> None:
    root = Path(root)
    for s in samples:
        path = root / s.image
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, pixels[s.image_id], allow_pickle=False)


def load_pixels(root: str | Path, sample: GroundingSample) -> np.ndarray:
    if sample.image is None:
        raise GenerationError(f"sample {sample.image_id} has no image file")
    path = Path(root) / sample.image
    if not path.exists():
        raise GenerationError(f"image file {path} is missing")
    return np.load(path, allow_pickle=False)
