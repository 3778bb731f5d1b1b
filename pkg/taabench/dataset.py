"""
Procedural glyph dataset: ten parametric shapes rendered from signed distance
functions, jittered, noised and clipped to [0, 1].
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Tuple

import numpy as np
from PIL import Image

from taabench.config import IMAGE_CHANNELS, IMAGE_SIZE, NUM_CLASSES

logger = logging.getLogger(__name__)

NOISE_STD = 0.05
MAX_ROTATION = np.deg2rad(12.0)
MAX_SHIFT = 2.0
SCALE_RANGE = (0.9, 1.1)
AMPLITUDE_RANGE = (0.8, 1.0)


def _segment(u: np.ndarray, v: np.ndarray, a: Tuple[float, float], b: Tuple[float, float]) -> np.ndarray:
    """Distance from every (u, v) to the segment a-b."""
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    t = np.clip(((u - ax) * dx + (v - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(u - (ax + t * dx), v - (ay + t * dy))


def _box(u, v):
    return np.maximum(np.abs(u), np.abs(v))


# Signed distance of each glyph; negative inside the stroke
SHAPES: Dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "hbar": lambda u, v: _segment(u, v, (-5, 0), (5, 0)) - 1.3,
    "vbar": lambda u, v: _segment(u, v, (0, -5), (0, 5)) - 1.3,
    "diagonal": lambda u, v: _segment(u, v, (-4, 4), (4, -4)) - 1.2,
    "plus": lambda u, v: np.minimum(_segment(u, v, (-5, 0), (5, 0)), _segment(u, v, (0, -5), (0, 5))) - 1.0,
    "cross": lambda u, v: np.minimum(_segment(u, v, (-4, -4), (4, 4)), _segment(u, v, (-4, 4), (4, -4))) - 1.0,
    "ring": lambda u, v: np.abs(np.hypot(u, v) - 4.2) - 1.0,
    "square": lambda u, v: _box(u, v) - 3.8,
    "corner": lambda u, v: np.minimum(_segment(u, v, (-4, -4), (-4, 4)), _segment(u, v, (-4, 4), (4, 4))) - 1.2,
    "dots": lambda u, v: np.min(
        [np.hypot(u - cx, v - cy) for cx in (-3.5, 3.5) for cy in (-3.5, 3.5)], axis=0) - 1.6,
    "frame": lambda u, v: np.abs(_box(u, v) - 4.5) - 0.8,
}
CLASS_NAMES: Tuple[str, ...] = tuple(SHAPES)


def render_glyph(label: int, rng: np.random.Generator, noise_std: float = NOISE_STD) -> np.ndarray:
    """One (16, 16, 1) image of class `label` with random pose, amplitude and noise."""
    angle = rng.uniform(-MAX_ROTATION, MAX_ROTATION)
    shift = rng.uniform(-MAX_SHIFT, MAX_SHIFT, size=2)
    scale = rng.uniform(*SCALE_RANGE)
    amplitude = rng.uniform(*AMPLITUDE_RANGE)

    rows, cols = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    center = (IMAGE_SIZE - 1) / 2.0
    px = cols - center - shift[0]
    py = rows - center - shift[1]
    cos, sin = np.cos(angle), np.sin(angle)
    u = (cos * px + sin * py) / scale
    v = (-sin * px + cos * py) / scale

    coverage = np.clip(0.5 - SHAPES[CLASS_NAMES[label]](u, v), 0.0, 1.0)
    image = amplitude * coverage + rng.normal(0.0, noise_std, size=coverage.shape)
    return np.clip(image, 0.0, 1.0).reshape(IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS)


def _render_split(n: int, seed_seq: np.random.SeedSequence) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed_seq)
    labels = rng.permutation(np.arange(n) % NUM_CLASSES)
    images = np.stack([render_glyph(int(label), rng) for label in labels])
    return images, labels.astype(np.int64)


@dataclass(frozen=True, eq=False)
class GlyphDataset:
    seed: int
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    num_classes: int = NUM_CLASSES

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return self.train_images.shape[1:]

    def class_counts(self, split: str = "train") -> np.ndarray:
        labels = self.train_labels if split == "train" else self.test_labels
        return np.bincount(labels, minlength=self.num_classes)

    def to_bytes(self) -> bytes:
        return b"".join(a.tobytes() for a in
                        (self.train_images, self.train_labels, self.test_images, self.test_labels))

    def export(self, directory) -> Path:
        """Write every image as a binary PGM plus labels.csv."""
        directory = Path(directory)
        image_dir = directory / "images"
        image_dir.mkdir(parents=True, exist_ok=True)
        rows: List[List[object]] = []
        for split, images, labels in (("train", self.train_images, self.train_labels),
                                      ("test", self.test_images, self.test_labels)):
            for i, (image, label) in enumerate(zip(images, labels)):
                name = f"{split}_{i:05d}.pgm"
                pixels = np.round(image[:, :, 0] * 255.0).astype(np.uint8)
                Image.fromarray(pixels).save(image_dir / name)
                rows.append([f"images/{name}", split, int(label), CLASS_NAMES[int(label)]])
        with open(directory / "labels.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["file", "split", "label", "class_name"])
            writer.writerows(rows)
        logger.info(f"🖼️ Exported {len(rows)} images to {directory}")
        return directory


def generate(seed: int, n_train: int = 2000, n_test: int = 500) -> GlyphDataset:
    """Train and test splits come from disjoint child seed streams."""
    if n_train <= 0 or n_test <= 0:
        raise ValueError(f"split sizes must be positive, got n_train={n_train}, n_test={n_test}")
    train_seq, test_seq = np.random.SeedSequence(seed).spawn(2)
    train_images, train_labels = _render_split(n_train, train_seq)
    test_images, test_labels = _render_split(n_test, test_seq)
    return GlyphDataset(seed, train_images, train_labels, test_images, test_labels)
