"""View construction: deterministic strong augmentations plus random pipelines.

Two layers of augmentation feed training:

1. A bank of ``K`` deterministic transforms (by default the four axis-aligned
   rotations, with the 0-degree rotation first). Each transform is treated as
   producing a *new* class: label ``y`` and transform index ``k`` map to the
   extended label ``K * (y - 1) + k``.
2. Random view pipelines in the SimCLR family. A positive pair is built from
   one "long" pipeline view (crop, flip, colour jitter, grayscale) and one
   "short" pipeline view (milder crop and jitter only).

All randomness flows through :class:`AugmentRng`, which keeps one named
generator per transform family (crop / flip / jitter / gray) so adding or
removing a transform does not shift the others' sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torchvision.transforms import functional as TF

from sdaf.errors import ConfigError
from sdaf.stream import LabeledExample

_LOG_ASPECT = (float(np.log(3.0 / 4.0)), float(np.log(4.0 / 3.0)))


# ---------------------------------------------------------------------------
# extended label space
# ---------------------------------------------------------------------------


def extend_label(y: int, k: int, K: int) -> int:
    """Map (class ``y``, transform index ``k``) to the extended label
    ``K * (y - 1) + k``; bijective onto ``1..K*C``."""
    if y < 1:
        raise ConfigError(f"class id must be >= 1, got {y}")
    if not (1 <= k <= K):
        raise ConfigError(f"transform index {k} outside 1..{K}")
    return K * (y - 1) + k


def invert_extended_label(y_ext: int, K: int) -> tuple[int, int]:
    """Inverse of :func:`extend_label`: recover ``(y, k)``."""
    if y_ext < 1:
        raise ConfigError(f"extended label must be >= 1, got {y_ext}")
    return (y_ext - 1) // K + 1, (y_ext - 1) % K + 1


# ---------------------------------------------------------------------------
# deterministic strong augmentations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SdaConfig:
    """Bank of K deterministic image transforms; the first must be identity."""

    transforms: tuple[Callable[[torch.Tensor], torch.Tensor], ...]
    names: tuple[str, ...]

    @property
    def K(self) -> int:
        return len(self.transforms)

    def apply(self, image: torch.Tensor, k: int) -> torch.Tensor:
        """Apply the 1-based transform ``S_k``."""
        if not (1 <= k <= self.K):
            raise ConfigError(f"transform index {k} outside 1..{self.K}")
        return self.transforms[k - 1](image)


def _rot(quarter_turns: int) -> Callable[[torch.Tensor], torch.Tensor]:
    if quarter_turns == 0:
        return lambda image: image
    return lambda image: torch.rot90(image, quarter_turns, dims=(-2, -1))


def rotation_sda(K: int = 4) -> SdaConfig:
    """Rotations at multiples of 90 degrees (exact tensor transpositions,
    no interpolation). ``K`` may be 1, 2, or 4 so the set stays a group."""
    if K not in (1, 2, 4):
        raise ConfigError(f"rotation bank supports K in (1, 2, 4), got {K}")
    step = 4 // K
    turns = [i * step for i in range(K)]
    return SdaConfig(
        transforms=tuple(_rot(t) for t in turns),
        names=tuple(f"rot{t * 90}" for t in turns),
    )


def identity_sda() -> SdaConfig:
    """K=1 bank containing only the identity."""
    return rotation_sda(K=1)


# ---------------------------------------------------------------------------
# random view pipelines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeriesParams:
    """One random-transform series (either the long or the short one)."""

    crop_area: tuple[float, float]
    flip_prob: float
    jitter_brightness: float
    jitter_contrast: float
    jitter_saturation: float
    jitter_hue: float
    gray_prob: float
    aspect_ratio_log: tuple[float, float] = _LOG_ASPECT


@dataclass(frozen=True)
class RandomPipelineConfig:
    """Long and short random series; a positive pair uses one view of each."""

    long: SeriesParams = SeriesParams(
        crop_area=(0.5, 1.0),
        flip_prob=0.5,
        jitter_brightness=0.4,
        jitter_contrast=0.4,
        jitter_saturation=0.4,
        jitter_hue=0.1,
        gray_prob=0.2,
    )
    short: SeriesParams = SeriesParams(
        crop_area=(0.75, 1.0),
        flip_prob=0.0,
        jitter_brightness=0.2,
        jitter_contrast=0.2,
        jitter_saturation=0.2,
        jitter_hue=0.05,
        gray_prob=0.0,
    )

    @classmethod
    def disabled(cls) -> "RandomPipelineConfig":
        """All randomness off: crops cover the full image, jitter is identity."""
        noop = SeriesParams(
            crop_area=(1.0, 1.0),
            flip_prob=0.0,
            jitter_brightness=0.0,
            jitter_contrast=0.0,
            jitter_saturation=0.0,
            jitter_hue=0.0,
            gray_prob=0.0,
            aspect_ratio_log=(0.0, 0.0),
        )
        return cls(long=noop, short=noop)

    def series(self, view_index: int) -> SeriesParams:
        """View 1 of a pair comes from the long series, view 2 from the short."""
        if view_index == 1:
            return self.long
        if view_index == 2:
            return self.short
        raise ConfigError(f"view index must be 1 or 2, got {view_index}")


class AugmentRng:
    """Named random substreams for the view pipelines.

    One ``torch.Generator`` per transform family, all derived from a single
    seed. ``draws`` counts scalar draws per family and ``pipeline_calls``
    counts whole series applications; tests use these to audit randomness
    consumption.
    """

    STREAMS = ("crop", "flip", "jitter", "gray")

    def __init__(self, seed: int):
        self.seed = seed
        self._gens: dict[str, torch.Generator] = {}
        for i, name in enumerate(self.STREAMS):
            state = np.random.SeedSequence([int(seed), i]).generate_state(2)
            gen = torch.Generator()
            gen.manual_seed(int(state[0]) << 32 | int(state[1]))
            self._gens[name] = gen
        self.draws = {name: 0 for name in self.STREAMS}
        self.pipeline_calls = 0

    def uniform(self, stream: str, n: int = 1) -> torch.Tensor:
        self.draws[stream] += n
        return torch.rand(n, generator=self._gens[stream], dtype=torch.float64)

    def randint(self, stream: str, high: int) -> int:
        """Uniform integer in ``[0, high)``; ``high == 0`` maps to 0 drawlessly."""
        if high <= 0:
            return 0
        self.draws[stream] += 1
        return int(torch.randint(high, (1,), generator=self._gens[stream]).item())

    def randperm(self, stream: str, n: int) -> list[int]:
        self.draws[stream] += n
        return torch.randperm(n, generator=self._gens[stream]).tolist()


def _random_resized_crop(
    image: torch.Tensor, params: SeriesParams, rng: AugmentRng
) -> torch.Tensor:
    h, w = image.shape[-2], image.shape[-1]
    area = float(h * w)
    crop = None
    for _ in range(10):
        frac = float(rng.uniform("crop")[0])
        target = area * (
            params.crop_area[0] + (params.crop_area[1] - params.crop_area[0]) * frac
        )
        log_lo, log_hi = params.aspect_ratio_log
        ar = math.exp(log_lo + (log_hi - log_lo) * float(rng.uniform("crop")[0]))
        cw = int(round(math.sqrt(target * ar)))
        ch = int(round(math.sqrt(target / ar)))
        if 0 < cw <= w and 0 < ch <= h:
            top = rng.randint("crop", h - ch + 1)
            left = rng.randint("crop", w - cw + 1)
            crop = image[..., top : top + ch, left : left + cw]
            break
    if crop is None:
        crop = image
    if crop.shape[-2:] == (h, w):
        return crop
    resized = torch.nn.functional.interpolate(
        crop.unsqueeze(0), size=(h, w), mode="bilinear", align_corners=False
    ).squeeze(0)
    return resized.clamp(0.0, 1.0)


def _color_jitter(
    image: torch.Tensor, params: SeriesParams, rng: AugmentRng
) -> torch.Tensor:
    # Factors and application order are always drawn, even when a factor
    # width is zero, so substream consumption does not depend on the config.
    order = rng.randperm("jitter", 4)
    u = rng.uniform("jitter", 4)
    b = 1.0 + params.jitter_brightness * (2.0 * float(u[0]) - 1.0)
    c = 1.0 + params.jitter_contrast * (2.0 * float(u[1]) - 1.0)
    s = 1.0 + params.jitter_saturation * (2.0 * float(u[2]) - 1.0)
    hch = params.jitter_hue * (2.0 * float(u[3]) - 1.0)
    for op in order:
        if op == 0 and b != 1.0:
            image = TF.adjust_brightness(image, b)
        elif op == 1 and c != 1.0:
            image = TF.adjust_contrast(image, c)
        elif op == 2 and s != 1.0:
            image = TF.adjust_saturation(image, s)
        elif op == 3 and hch != 0.0:
            image = TF.adjust_hue(image, hch)
    return image


def apply_pipeline(
    image: torch.Tensor, params: SeriesParams, rng: AugmentRng
) -> torch.Tensor:
    """Run one random series on a single ``(3, h, w)`` image."""
    rng.pipeline_calls += 1
    out = _random_resized_crop(image, params, rng)
    if params.flip_prob > 0.0 and float(rng.uniform("flip")[0]) < params.flip_prob:
        out = torch.flip(out, dims=(-1,))
    out = _color_jitter(out, params, rng)
    if params.gray_prob > 0.0 and float(rng.uniform("gray")[0]) < params.gray_prob:
        out = TF.rgb_to_grayscale(out, num_output_channels=3)
    return out


# ---------------------------------------------------------------------------
# view batches
# ---------------------------------------------------------------------------


@dataclass
class ViewBatch:
    """Stacked augmented views plus the bookkeeping needed to pair them.

    ``labels`` carries extended labels for SDA views, plain class labels for
    SCL/SCR, and the source index for SimCLR. ``source_index`` / ``aug_index``
    / ``view_index`` identify each view's (i, k, j) coordinates.
    """

    images: torch.Tensor
    labels: torch.Tensor
    source_index: torch.Tensor
    aug_index: torch.Tensor
    view_index: torch.Tensor
    origin: str

    def __len__(self) -> int:
        return int(self.images.shape[0])


def _stack(views, labels, src, aug, vi, origin) -> ViewBatch:
    return ViewBatch(
        images=torch.stack(views),
        labels=torch.tensor(labels, dtype=torch.long),
        source_index=torch.tensor(src, dtype=torch.long),
        aug_index=torch.tensor(aug, dtype=torch.long),
        view_index=torch.tensor(vi, dtype=torch.long),
        origin=origin,
    )


def make_views_sda(
    batch: Sequence[LabeledExample],
    sda: SdaConfig,
    pipeline: RandomPipelineConfig,
    rng: AugmentRng,
    align_labels: bool = False,
) -> ViewBatch:
    """Build the 2K views per image used by the full method.

    Each input ``x_i`` becomes ``S_k(x_i)`` for every transform in the bank,
    and every transformed instance gets a long-series view (j=1) and a
    short-series view (j=2), labelled with the extended label. With
    ``align_labels`` the views keep the original class label instead (the
    variant that treats strong augmentations as the same class).
    """
    views, labels, src, aug, vi = [], [], [], [], []
    for i, ex in enumerate(batch):
        if ex.image.shape[-1] != ex.image.shape[-2]:
            raise ConfigError(
                f"rotation transforms need square images, got {tuple(ex.image.shape)}"
            )
        for k in range(1, sda.K + 1):
            strong = sda.apply(ex.image, k)
            label = ex.label if align_labels else extend_label(ex.label, k, sda.K)
            for j in (1, 2):
                views.append(apply_pipeline(strong, pipeline.series(j), rng))
                labels.append(label)
                src.append(i)
                aug.append(k)
                vi.append(j)
    return _stack(views, labels, src, aug, vi, "SDA")


def make_views_scl(
    batch: Sequence[LabeledExample],
    pipeline: RandomPipelineConfig,
    rng: AugmentRng,
) -> ViewBatch:
    """Two random views per image, both carrying the original class label."""
    views, labels, src, aug, vi = [], [], [], [], []
    for i, ex in enumerate(batch):
        for j in (1, 2):
            views.append(apply_pipeline(ex.image, pipeline.series(j), rng))
            labels.append(ex.label)
            src.append(i)
            aug.append(1)
            vi.append(j)
    return _stack(views, labels, src, aug, vi, "SCL")


def make_views_scr(
    batch: Sequence[LabeledExample],
    pipeline: RandomPipelineConfig,
    rng: AugmentRng,
) -> ViewBatch:
    """Positive pair per image: the untouched original (j=1) and one
    long-series random view (j=2)."""
    views, labels, src, aug, vi = [], [], [], [], []
    for i, ex in enumerate(batch):
        views.append(ex.image)
        labels.append(ex.label)
        src.append(i)
        aug.append(1)
        vi.append(1)
        views.append(apply_pipeline(ex.image, pipeline.long, rng))
        labels.append(ex.label)
        src.append(i)
        aug.append(1)
        vi.append(2)
    return _stack(views, labels, src, aug, vi, "SCR")


def make_views_simclr(
    batch: Sequence[LabeledExample],
    pipeline: RandomPipelineConfig,
    rng: AugmentRng,
) -> ViewBatch:
    """Two random views per image labelled by source index (self-supervised)."""
    views, labels, src, aug, vi = [], [], [], [], []
    for i, ex in enumerate(batch):
        for j in (1, 2):
            views.append(apply_pipeline(ex.image, pipeline.series(j), rng))
            labels.append(i)
            src.append(i)
            aug.append(1)
            vi.append(j)
    return _stack(views, labels, src, aug, vi, "SIMCLR")
