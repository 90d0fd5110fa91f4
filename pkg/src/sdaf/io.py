"""Binary blob formats shared by dataset ingestion, memory checkpoints, and
feature dumps.

Two on-disk shapes, each a raw row-major array next to a JSON sidecar
(``<stem>.json``):

- image blob: uint8, shape ``(n, h, w, 3)``, sidecar
  ``{"n", "h", "w", "c", "labels"}``
- feature dump: float32, shape ``(n, d)``, sidecar
  ``{"n", "d", "stage", "dataset_stage"}``
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from sdaf.errors import ConfigError


def sidecar_path(blob_path: str | Path) -> Path:
    return Path(blob_path).with_suffix(".json")


def save_image_blob(path: str | Path, images: np.ndarray, labels: list[int]) -> None:
    """Write ``(n, h, w, 3)`` uint8 images plus their labels."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    if images.ndim != 4 or images.shape[3] != 3:
        raise ConfigError(f"image blob must have shape (n, h, w, 3), got {images.shape}")
    n, h, w, c = images.shape
    if len(labels) != n:
        raise ConfigError(f"{n} images but {len(labels)} labels")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(images.tobytes())
    meta = {"n": n, "h": h, "w": w, "c": c, "labels": [int(v) for v in labels]}
    sidecar_path(path).write_text(json.dumps(meta))


def load_image_blob(path: str | Path) -> tuple[np.ndarray, list[int]]:
    """Read an image blob back as ``(uint8 array, labels)``."""
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    n, h, w, c = meta["n"], meta["h"], meta["w"], meta["c"]
    if c != 3:
        raise ConfigError(f"expected 3 channels, sidecar says c={c}")
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if raw.size != n * h * w * c:
        raise ConfigError(
            f"blob holds {raw.size} bytes, sidecar implies {n * h * w * c}"
        )
    return raw.reshape(n, h, w, c).copy(), list(meta["labels"])


def save_feature_dump(
    path: str | Path, features: np.ndarray, stage: int, dataset_stage: int
) -> None:
    """Write an ``(n, d)`` float32 feature matrix with stage provenance."""
    features = np.ascontiguousarray(features, dtype=np.float32)
    if features.ndim != 2:
        raise ConfigError(f"feature dump must be 2-d, got shape {features.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(features.tobytes())
    meta = {
        "n": features.shape[0],
        "d": features.shape[1],
        "stage": stage,
        "dataset_stage": dataset_stage,
    }
    sidecar_path(path).write_text(json.dumps(meta))


def load_feature_dump(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    raw = np.frombuffer(path.read_bytes(), dtype=np.float32)
    if raw.size != meta["n"] * meta["d"]:
        raise ConfigError(
            f"dump holds {raw.size} floats, sidecar implies {meta['n'] * meta['d']}"
        )
    return raw.reshape(meta["n"], meta["d"]).copy(), meta
