"""Nearest-class-mean inference over the deterministic transform bank.

Test-time prediction never touches the classifier head. Instead, every memory
exemplar is pushed through the current encoder under each transform ``S_k``,
per-(class, k) centers are averaged, and a test image x is assigned

    argmin_c  mean_k  d(F(S_k(x)), m_ck)

where ``d`` is the Mahalanobis distance under the pseudo-inverse of the
covariance of the pooled exemplar features (or plain Euclidean distance as an
ablation). Ties go to the lowest class id. Centers and metric state are
immutable once fitted and exportable as an ``.npz`` archive.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from sdaf.augment import SdaConfig, identity_sda, rotation_sda
from sdaf.errors import ConfigError
from sdaf.memory import ReplayMemory
from sdaf.network import ModelBundle
from sdaf.stream import LabeledExample

logger = logging.getLogger(__name__)

# relative singular-value cutoff for the covariance pseudo-inverse; memory
# sized samples in d~160 leave the covariance rank-deficient
PINV_RCOND = 1e-6


@dataclass(frozen=True)
class ClassCenters:
    """Per-(class, transform) feature means from memory exemplars.

    ``centers`` is (C, K, d); ``counts`` is (C, K) and a zero count marks a
    missing group whose term is dropped from the prediction average.
    """

    class_ids: tuple[int, ...]
    centers: np.ndarray
    counts: np.ndarray
    sda_names: tuple[str, ...]
    normalized: bool

    @property
    def K(self) -> int:
        return self.centers.shape[1]


@dataclass(frozen=True)
class MetricState:
    """Distance definition: ``metric`` plus the precision matrix Σ⁻¹."""

    metric: str
    precision: np.ndarray

    def __post_init__(self):
        if self.metric not in ("mahalanobis", "euclidean"):
            raise ConfigError(f"unknown metric {self.metric!r}")


@dataclass(frozen=True)
class Predictions:
    """Batch prediction output; ``distances[i, j]`` is the mean distance of
    sample i to class ``class_ids[j]`` (the OOD score reuses the row minima)."""

    class_ids: tuple[int, ...]
    labels: np.ndarray
    distances: np.ndarray


def _as_examples(memory) -> list[LabeledExample]:
    if isinstance(memory, ReplayMemory):
        return list(memory.slots)
    return list(memory)


def encode_views(
    images: torch.Tensor,
    model: ModelBundle,
    sda: SdaConfig,
    *,
    normalize: bool = False,
    chunk: int = 512,
) -> np.ndarray:
    """Features of every transform of every image, shape (n, K, d)."""
    was_training = model.training
    model.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], chunk):
            block = images[start : start + chunk]
            per_k = []
            for k in range(1, sda.K + 1):
                feats = model.forward_features(sda.apply(block, k))
                if normalize:
                    feats = torch.nn.functional.normalize(feats, dim=1, eps=1e-12)
                per_k.append(feats)
            outs.append(torch.stack(per_k, dim=1))
    if was_training:
        model.train()
    return torch.cat(outs, dim=0).double().numpy()


def _memory_features(
    memory, model: ModelBundle, sda: SdaConfig, normalize: bool
) -> tuple[np.ndarray, np.ndarray]:
    examples = _as_examples(memory)
    if not examples:
        raise ConfigError("cannot fit inference state from empty memory")
    images = torch.stack([ex.image for ex in examples])
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    return encode_views(images, model, sda, normalize=normalize), labels


def centers_from_features(
    features: np.ndarray,
    labels: np.ndarray,
    sda_names: tuple[str, ...],
    normalized: bool,
) -> ClassCenters:
    class_ids = tuple(sorted(int(c) for c in np.unique(labels)))
    _, K, d = features.shape
    centers = np.zeros((len(class_ids), K, d))
    counts = np.zeros((len(class_ids), K), dtype=np.int64)
    for row, c in enumerate(class_ids):
        group = features[labels == c]
        centers[row] = group.mean(axis=0)
        counts[row] = group.shape[0]
    return ClassCenters(class_ids, centers, counts, tuple(sda_names), normalized)


def compute_centers(
    memory, model: ModelBundle, sda: SdaConfig, *, normalize: bool = False
) -> ClassCenters:
    """Mean encoder feature per (class, transform) over memory exemplars."""
    features, labels = _memory_features(memory, model, sda, normalize)
    return centers_from_features(features, labels, sda.names, normalize)


def metric_from_features(features_2d: np.ndarray, metric: str) -> MetricState:
    """Fit the precision matrix from pooled features of shape (n, d)."""
    d = features_2d.shape[1]
    if metric == "euclidean":
        return MetricState("euclidean", np.eye(d))
    if metric != "mahalanobis":
        raise ConfigError(f"unknown metric {metric!r}")
    if features_2d.shape[0] < 2:
        logger.warning(
            "mahalanobis needs >= 2 pooled features, got %d; "
            "falling back to euclidean",
            features_2d.shape[0],
        )
        return MetricState("euclidean", np.eye(d))
    cov = np.cov(features_2d, rowvar=False)
    precision = np.linalg.pinv(cov, rcond=PINV_RCOND, hermitian=True)
    precision = (precision + precision.T) / 2.0
    return MetricState("mahalanobis", precision)


def fit_metric(
    memory,
    model: ModelBundle,
    sda: SdaConfig,
    metric: str = "mahalanobis",
    *,
    normalize: bool = False,
) -> MetricState:
    """Precision from the pooled set of all (exemplar, transform) features."""
    features, _ = _memory_features(memory, model, sda, normalize)
    return metric_from_features(features.reshape(-1, features.shape[-1]), metric)


def build_inference(
    memory,
    model: ModelBundle,
    sda: SdaConfig,
    metric: str = "mahalanobis",
    *,
    normalize: bool = False,
) -> tuple[ClassCenters, MetricState]:
    """Centers plus metric state with a single encoder pass over memory."""
    features, labels = _memory_features(memory, model, sda, normalize)
    centers = centers_from_features(features, labels, sda.names, normalize)
    state = metric_from_features(features.reshape(-1, features.shape[-1]), metric)
    return centers, state


def mahalanobis_distance(
    x: np.ndarray, center: np.ndarray, precision: np.ndarray
) -> np.ndarray:
    """sqrt((x-m)ᵀ Σ⁻¹ (x-m)) for row-stacked x; clamps tiny negatives."""
    delta = np.atleast_2d(x) - center
    sq = np.einsum("nd,de,ne->n", delta, precision, delta)
    return np.sqrt(np.maximum(sq, 0.0))


def class_distances(
    features: np.ndarray, centers: ClassCenters, state: MetricState
) -> np.ndarray:
    """Mean distance of each sample to each class, shape (n, C).

    ``features`` is (n, K, d) from :func:`encode_views`; per-class averages
    run over the transform indices whose center group is nonempty.
    """
    n, K, _ = features.shape
    if K != centers.K:
        raise ConfigError(
            f"feature bank has K={K} transforms but centers were fitted "
            f"with K={centers.K}"
        )
    dists = np.zeros((n, len(centers.class_ids)))
    for row in range(len(centers.class_ids)):
        total = np.zeros(n)
        available = 0
        for k in range(K):
            if centers.counts[row, k] == 0:
                continue
            total += mahalanobis_distance(
                features[:, k, :], centers.centers[row, k], state.precision
            )
            available += 1
        if available == 0:
            raise ConfigError(
                f"class {centers.class_ids[row]} has no centers under any "
                "transform"
            )
        dists[:, row] = total / available
    return dists


def predict_batch(
    images: torch.Tensor,
    model: ModelBundle,
    sda: SdaConfig,
    centers: ClassCenters,
    state: MetricState,
) -> Predictions:
    """Nearest-center class ids for a batch; ties go to the lowest class id."""
    if not centers.class_ids:
        raise ConfigError("no centers fitted")
    features = encode_views(images, model, sda, normalize=centers.normalized)
    dists = class_distances(features, centers, state)
    ids = np.asarray(centers.class_ids)
    # argmin returns the first minimum; class_ids ascend, so ties resolve low
    labels = ids[np.argmin(dists, axis=1)]
    return Predictions(centers.class_ids, labels, dists)


def predict(
    image: torch.Tensor,
    model: ModelBundle,
    sda: SdaConfig,
    centers: ClassCenters,
    state: MetricState,
) -> int:
    """Single-image wrapper over :func:`predict_batch`."""
    result = predict_batch(image.unsqueeze(0), model, sda, centers, state)
    return int(result.labels[0])


def sda_from_names(names: Iterable[str]) -> SdaConfig:
    """Rebuild a deterministic transform bank from its stored names."""
    names = tuple(names)
    if names == ("identity",):
        return identity_sda()
    for K in (1, 2, 4):
        if names == rotation_sda(K).names:
            return rotation_sda(K)
    raise ConfigError(f"unknown transform bank {names!r}")


def save_inference(path, centers: ClassCenters, state: MetricState) -> Path:
    """Archive centers plus metric state as named arrays."""
    path = Path(path).with_suffix(".npz")
    np.savez(
        path,
        class_ids=np.asarray(centers.class_ids, dtype=np.int64),
        centers=centers.centers,
        counts=centers.counts,
        sda_names=np.asarray(centers.sda_names),
        normalized=np.asarray(centers.normalized),
        metric=np.asarray(state.metric),
        precision=state.precision,
    )
    return path


def load_inference(path) -> tuple[ClassCenters, MetricState]:
    with np.load(Path(path), allow_pickle=False) as data:
        centers = ClassCenters(
            class_ids=tuple(int(c) for c in data["class_ids"]),
            centers=data["centers"],
            counts=data["counts"],
            sda_names=tuple(str(s) for s in data["sda_names"]),
            normalized=bool(data["normalized"]),
        )
        state = MetricState(str(data["metric"]), data["precision"])
    return centers, state
