"""Stage schedules and the one-epoch data stream.

A run consumes a non-stationary stream: ``T`` stages with disjoint class
sets, each stage delivered as a sequence of small disjoint batches. Every
training example is yielded exactly once (the one-epoch contract); anything
the learner wants to see again has to survive in replay memory.

Class ids on the stream are remapped to the contiguous convention used
throughout the package: classes learnt earlier get lower ids, so after
stage ``t`` the seen classes are exactly ``1..C_seen``. The original dataset
label is kept on each example for reporting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from sdaf.errors import ConfigError
from sdaf.io import load_image_blob


@dataclass
class LabeledExample:
    """One image plus its class label.

    ``image`` is a ``(3, h, w)`` float tensor with values in ``[0, 1]`` and
    ``h == w`` (square images are required by the rotation augmentations).
    ``label`` is the contiguous 1-based class id once the example has been
    routed through a schedule; ``raw_label`` preserves the dataset's own id.
    ``example_id`` is unique within a dataset and identifies the example
    across batches, memory, and tests.
    """

    image: torch.Tensor
    label: int
    example_id: int
    raw_label: int | None = None

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ConfigError(f"expected (3, h, w) image, got {tuple(self.image.shape)}")
        if self.raw_label is None:
            self.raw_label = self.label


@dataclass(frozen=True)
class StageSchedule:
    """Ordered partition of the label set into ``T`` disjoint stages.

    ``stages`` holds the original dataset labels per stage;
    ``remap`` sends an original label to its contiguous 1-based id
    (stage-1 classes first, then stage-2 classes, ...).
    """

    stages: tuple[tuple[int, ...], ...]
    remap: dict[int, int] = field(hash=False)

    @property
    def total_stages(self) -> int:
        return len(self.stages)

    @property
    def classes_per_stage(self) -> int:
        return len(self.stages[0])

    def classes_seen(self, stage_index: int) -> int:
        """Number of classes introduced by the end of 1-based stage ``t``."""
        return sum(len(s) for s in self.stages[:stage_index])

    def contiguous_classes(self, stage_index: int) -> list[int]:
        """Contiguous ids of the classes introduced at 1-based stage ``t``."""
        start = self.classes_seen(stage_index - 1)
        return list(range(start + 1, start + 1 + len(self.stages[stage_index - 1])))


@dataclass
class StreamBatch:
    """A disjoint slice of one stage's stream, ``stage_index``/``batch_index``
    are both 1-based."""

    examples: list[LabeledExample]
    stage_index: int
    batch_index: int

    def __len__(self) -> int:
        return len(self.examples)

    def images(self) -> torch.Tensor:
        return torch.stack([ex.image for ex in self.examples])

    def labels(self) -> torch.Tensor:
        return torch.tensor([ex.label for ex in self.examples], dtype=torch.long)


def build_schedule(class_labels: Sequence[int], stages: int, seed: int) -> StageSchedule:
    """Randomly partition ``class_labels`` into ``stages`` equal disjoint sets.

    The class-arrival order is a seed-determined permutation, so different
    seeds give different class orders for averaging runs.
    """
    labels = sorted(set(int(c) for c in class_labels))
    if len(labels) != len(list(class_labels)):
        raise ConfigError("class_labels contains duplicates")
    if stages < 1:
        raise ConfigError(f"need at least one stage, got {stages}")
    if len(labels) % stages != 0:
        raise ConfigError(
            f"{len(labels)} classes cannot be split into {stages} equal stages"
        )
    per_stage = len(labels) // stages
    rng = np.random.default_rng([int(seed), 0x5C4ED])
    order = [labels[i] for i in rng.permutation(len(labels))]
    stage_sets = tuple(
        tuple(order[t * per_stage : (t + 1) * per_stage]) for t in range(stages)
    )
    remap = {orig: i + 1 for i, orig in enumerate(order)}
    return StageSchedule(stages=stage_sets, remap=remap)


def stream_batches(
    dataset: Sequence[LabeledExample],
    schedule: StageSchedule,
    batch_size: int,
    seed: int,
    shuffle_within_stage: bool = True,
) -> Iterator[StreamBatch]:
    """Yield the one-epoch stream: per stage, that stage's examples in a
    seed-determined order, chunked into batches of ``batch_size``.

    The last partial batch is yielded rather than dropped. Examples are
    re-labelled with their contiguous class id; an empty stage is a
    configuration error.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    by_label: dict[int, list[LabeledExample]] = {}
    for ex in dataset:
        by_label.setdefault(int(ex.raw_label), []).append(ex)

    for t, stage_classes in enumerate(schedule.stages, start=1):
        stage_examples = [ex for c in stage_classes for ex in by_label.get(c, [])]
        if not stage_examples:
            raise ConfigError(f"stage {t} has no examples (classes {stage_classes})")
        if shuffle_within_stage:
            rng = np.random.default_rng([int(seed), t])
            order = rng.permutation(len(stage_examples))
            stage_examples = [stage_examples[i] for i in order]
        for u, start in enumerate(range(0, len(stage_examples), batch_size), start=1):
            chunk = stage_examples[start : start + batch_size]
            remapped = [
                LabeledExample(
                    image=ex.image,
                    label=schedule.remap[int(ex.raw_label)],
                    example_id=ex.example_id,
                    raw_label=ex.raw_label,
                )
                for ex in chunk
            ]
            yield StreamBatch(examples=remapped, stage_index=t, batch_index=u)


def _to_float_images(images_u8: np.ndarray) -> torch.Tensor:
    # (n, h, w, 3) uint8 -> (n, 3, h, w) float in [0, 1]
    arr_np = np.ascontiguousarray(images_u8)
    if not arr_np.flags.writeable:
        arr_np = arr_np.copy()
    arr = torch.from_numpy(arr_np)
    return arr.permute(0, 3, 1, 2).contiguous().float() / 255.0


def _check_square(images: torch.Tensor) -> None:
    if images.shape[-1] != images.shape[-2]:
        raise ConfigError(
            f"images must be square, got {images.shape[-2]}x{images.shape[-1]}"
        )


def dataset_from_arrays(
    images_u8: np.ndarray, labels: Sequence[int], id_offset: int = 0
) -> list[LabeledExample]:
    """Build examples from an in-memory ``(n, h, w, 3)`` uint8 array."""
    images = _to_float_images(images_u8)
    _check_square(images)
    if images.shape[0] != len(labels):
        raise ConfigError(f"{images.shape[0]} images but {len(labels)} labels")
    return [
        LabeledExample(image=images[i], label=int(labels[i]), example_id=id_offset + i)
        for i in range(images.shape[0])
    ]


def load_blob_dataset(path: str | Path) -> list[LabeledExample]:
    """Ingest a binary image blob (uint8 + JSON sidecar) as a dataset."""
    images_u8, labels = load_image_blob(path)
    return dataset_from_arrays(images_u8, labels)


def load_directory_dataset(root: str | Path) -> list[LabeledExample]:
    """Ingest a directory of per-class image files.

    Layout: ``root/<class>/*.png`` (any Pillow-readable format). Directory
    names that parse as integers are used as labels directly; otherwise
    classes are numbered 1..C in sorted name order.
    """
    from PIL import Image

    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ConfigError(f"no class subdirectories under {root}")
    examples: list[LabeledExample] = []
    next_id = 0
    for fallback, cdir in enumerate(class_dirs, start=1):
        try:
            label = int(cdir.name)
        except ValueError:
            label = fallback
        for img_path in sorted(cdir.iterdir()):
            if img_path.is_dir():
                continue
            with Image.open(img_path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            image = _to_float_images(arr[None])[0]
            _check_square(image[None])
            examples.append(
                LabeledExample(image=image, label=label, example_id=next_id)
            )
            next_id += 1
    return examples
