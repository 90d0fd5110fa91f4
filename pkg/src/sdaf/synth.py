"""Synthetic image dataset for desk-scale runs.

Classes are oriented sinusoidal gratings with a class-specific color tint.
Orientations are chosen inside (0, 90) degrees so that the deterministic
90-degree rotations used at training time never turn one class into another:
a grating is unchanged by 180-degree rotation, a horizontal flip maps
orientation t to 180 - t, and a quarter turn maps {t, 180 - t} to
{t + 90, 90 - t}. The class orientations below avoid pairs summing to 90 or
180, so those orbits stay disjoint and rotated views are genuinely new
content rather than aliases of other classes.

Phase, frequency, exact angle, tint, and pixel noise are jittered per image;
a single pass over a few hundred examples per class is enough to learn the
classes, and classes absent from a training stage are forgettable, which is
what the trend checks need.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sdaf.errors import ConfigError
from sdaf.stream import LabeledExample, dataset_from_arrays

# pairwise sums avoid 90 and 180 (see module docstring)
_ORIENTATIONS = (10.0, 30.0, 55.0, 75.0, 18.0, 40.0, 62.0, 84.0)
_TINTS = (
    (1.0, 0.55, 0.55),
    (0.55, 1.0, 0.55),
    (0.55, 0.55, 1.0),
    (1.0, 1.0, 0.5),
    (1.0, 0.55, 1.0),
    (0.55, 1.0, 1.0),
    (1.0, 0.8, 0.55),
    (0.7, 0.7, 0.7),
)


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 4
    train_per_class: int = 250
    test_per_class: int = 50
    image_size: int = 32
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.n_classes <= len(_ORIENTATIONS)):
            raise ConfigError(
                f"n_classes must lie in 1..{len(_ORIENTATIONS)}, got {self.n_classes}"
            )
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("need at least one example per class and split")
        if self.image_size < 8:
            raise ConfigError("image_size must be >= 8")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")


def _grating_images(
    spec: SyntheticSpec, per_class: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    s = spec.image_size
    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    xx = xx / s
    yy = yy / s
    images = np.empty((spec.n_classes * per_class, s, s, 3), dtype=np.uint8)
    labels = np.empty(spec.n_classes * per_class, dtype=np.int64)
    row = 0
    for c in range(spec.n_classes):
        base_angle = _ORIENTATIONS[c]
        tint = np.array(_TINTS[c])
        for _ in range(per_class):
            angle = np.deg2rad(base_angle + rng.uniform(-3.0, 3.0))
            freq = 3.0 * (1.0 + 0.1 * rng.uniform(-1.0, 1.0))
            phase = rng.uniform(0.0, 2.0 * np.pi)
            wave = np.sin(
                2.0 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase
            )
            gains = tint * (1.0 + rng.uniform(-0.1, 0.1, size=3))
            img = 0.5 + 0.35 * wave[..., None] * gains[None, None, :]
            if spec.noise > 0:
                img = img + rng.normal(0.0, spec.noise, size=img.shape)
            images[row] = np.clip(img * 255.0, 0, 255).astype(np.uint8)
            labels[row] = c + 1
            row += 1
    return images, labels


def make_synthetic_dataset(
    spec: SyntheticSpec,
) -> tuple[list[LabeledExample], list[LabeledExample]]:
    """Train and test example lists with disjoint example ids."""
    train_rng = np.random.default_rng([spec.seed, 0x7121])
    test_rng = np.random.default_rng([spec.seed, 0x7E57])
    train_images, train_labels = _grating_images(spec, spec.train_per_class, train_rng)
    test_images, test_labels = _grating_images(spec, spec.test_per_class, test_rng)
    train = dataset_from_arrays(train_images, train_labels)
    test = dataset_from_arrays(test_images, test_labels, id_offset=len(train))
    return train, test
