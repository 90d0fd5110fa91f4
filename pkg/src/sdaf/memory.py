"""Fixed-capacity replay memory: reservoir updates, uniform retrieval.

The reservoir step is applied per offered example, which keeps the classic
guarantee: after ``n >= capacity`` offers, every stream example is retained
with probability ``capacity / n``. No per-class quota is enforced; a class
can vanish under replacement and downstream inference has to cope.
"""

from __future__ import annotations

import json
import random
from pathlib import Path

import numpy as np
import torch

from sdaf.io import load_image_blob, save_image_blob, sidecar_path
from sdaf.stream import LabeledExample, StreamBatch


class ReplayMemory:
    """Exemplar store with at most ``capacity`` slots.

    The training loop is the sole writer; retrieval never mutates state.
    """

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 0:
            raise ValueError(f"capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self.slots: list[LabeledExample] = []
        self.seen_count = 0
        self.rng = random.Random(seed)

    def __len__(self) -> int:
        return len(self.slots)

    def update(self, batch: StreamBatch | list[LabeledExample]) -> None:
        """Offer a batch to the reservoir, one example at a time."""
        examples = batch.examples if isinstance(batch, StreamBatch) else batch
        for ex in examples:
            self.seen_count += 1
            if self.capacity == 0:
                continue
            if len(self.slots) < self.capacity:
                self.slots.append(ex)
            else:
                j = self.rng.randrange(self.seen_count)
                if j < self.capacity:
                    self.slots[j] = ex

    def retrieve(self, m: int) -> list[LabeledExample]:
        """Sample ``min(m, len(self))`` stored examples uniformly without
        replacement."""
        if m < 0:
            raise ValueError(f"retrieval size must be >= 0, got {m}")
        k = min(m, len(self.slots))
        if k == 0:
            return []
        idx = self.rng.sample(range(len(self.slots)), k)
        return [self.slots[i] for i in idx]

    def exemplars_by_class(self) -> dict[int, list[LabeledExample]]:
        """Partition the stored exemplars by contiguous class id."""
        groups: dict[int, list[LabeledExample]] = {}
        for ex in self.slots:
            groups.setdefault(int(ex.label), []).append(ex)
        return groups

    # -- checkpointing ------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Persist contents as an image blob; extra fields ride the sidecar."""
        if self.slots:
            imgs = torch.stack([ex.image for ex in self.slots])
            images_u8 = (
                (imgs.clamp(0, 1) * 255.0).round().to(torch.uint8).permute(0, 2, 3, 1)
            ).numpy()
        else:
            images_u8 = np.zeros((0, 1, 1, 3), dtype=np.uint8)
        labels = [int(ex.label) for ex in self.slots]
        save_image_blob(path, images_u8, labels)
        side = sidecar_path(path)
        meta = json.loads(side.read_text())
        meta["capacity"] = self.capacity
        meta["seen_count"] = self.seen_count
        meta["raw_labels"] = [int(ex.raw_label) for ex in self.slots]
        meta["example_ids"] = [int(ex.example_id) for ex in self.slots]
        side.write_text(json.dumps(meta))

    @classmethod
    def load(cls, path: str | Path, seed: int = 0) -> "ReplayMemory":
        images_u8, labels = load_image_blob(path)
        meta = json.loads(sidecar_path(path).read_text())
        mem = cls(capacity=int(meta["capacity"]), seed=seed)
        mem.seen_count = int(meta["seen_count"])
        imgs = (
            torch.from_numpy(images_u8).permute(0, 3, 1, 2).contiguous().float() / 255.0
        )
        raw_labels = meta.get("raw_labels", labels)
        example_ids = meta.get("example_ids", list(range(len(labels))))
        mem.slots = [
            LabeledExample(
                image=imgs[i],
                label=int(labels[i]),
                example_id=int(example_ids[i]),
                raw_label=int(raw_labels[i]),
            )
            for i in range(len(labels))
        ]
        return mem
