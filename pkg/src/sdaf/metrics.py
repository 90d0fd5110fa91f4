"""Evaluation quantities for incremental runs.

Everything here is a pure function of accuracy matrices or feature matrices:
average incremental accuracy, end accuracy, forgetting, linear CKA between
representation dumps, balancedness of the final per-class accuracies, a
rank-based OOD AUC, scree eigenvalues, and confusion matrices.

Accuracy matrices are ragged: row ``t`` holds one per-class accuracy for each
class seen by the end of stage ``t``, so row lengths grow with ``t``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from sdaf.errors import ConfigError


@dataclass(frozen=True)
class AccuracyMatrix:
    """Per-class accuracies after each stage; ``rows[t][c]`` in [0, 1]."""

    rows: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        if not self.rows:
            raise ConfigError("accuracy matrix needs at least one stage row")
        prev = 0
        for t, row in enumerate(self.rows):
            if len(row) <= 0 or len(row) < prev:
                raise ConfigError(f"row {t} shorter than the previous stage")
            prev = len(row)
            for a in row:
                if not (0.0 <= a <= 1.0):
                    raise ConfigError(f"accuracy {a} outside [0, 1]")

    @property
    def stages(self) -> int:
        return len(self.rows)

    @property
    def class_counts(self) -> tuple[int, ...]:
        return tuple(len(row) for row in self.rows)

    def save(self, path) -> Path:
        path = Path(path)
        payload = {
            "class_counts": list(self.class_counts),
            "rows": [list(row) for row in self.rows],
        }
        path.write_text(json.dumps(payload, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "AccuracyMatrix":
        payload = json.loads(Path(path).read_text())
        matrix = cls(tuple(tuple(float(a) for a in row) for row in payload["rows"]))
        if list(matrix.class_counts) != list(payload["class_counts"]):
            raise ConfigError(f"{path}: class_counts disagree with row lengths")
        return matrix


def _as_matrix(matrix) -> AccuracyMatrix:
    if isinstance(matrix, AccuracyMatrix):
        return matrix
    return AccuracyMatrix(tuple(tuple(float(a) for a in row) for row in matrix))


def avg_incremental_accuracy(matrix) -> float:
    """Mean over stages of the per-stage mean per-class accuracy."""
    matrix = _as_matrix(matrix)
    return float(np.mean([np.mean(row) for row in matrix.rows]))


def end_accuracy(matrix) -> float:
    """Mean per-class accuracy of the final stage row."""
    matrix = _as_matrix(matrix)
    return float(np.mean(matrix.rows[-1]))


def forgetting(matrix) -> float:
    """Average drop from each class's best earlier accuracy.

    For stage t >= 2 and each class seen before t, the drop is the class's
    maximum accuracy over stages < t minus its accuracy at t; stage means are
    averaged over t = 2..T. Undefined for a single stage.
    """
    matrix = _as_matrix(matrix)
    if matrix.stages < 2:
        raise ConfigError("forgetting undefined for a single stage")
    stage_means = []
    for t in range(1, matrix.stages):
        prior_classes = len(matrix.rows[t - 1])
        drops = []
        for c in range(prior_classes):
            best = max(matrix.rows[l][c] for l in range(t) if c < len(matrix.rows[l]))
            drops.append(best - matrix.rows[t][c])
        stage_means.append(np.mean(drops))
    return float(np.mean(stage_means))


def linear_cka(r1: np.ndarray, r2: np.ndarray) -> float:
    """Linear centered kernel alignment between two feature matrices.

    Rows are paired samples; columns are centered internally. Invariant to
    orthogonal transforms and positive rescaling of either matrix.
    """
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    if r1.ndim != 2 or r2.ndim != 2:
        raise ConfigError("CKA expects 2-d feature matrices")
    if r1.shape[0] != r2.shape[0]:
        raise ConfigError(
            f"CKA needs equal row counts, got {r1.shape[0]} and {r2.shape[0]}"
        )
    r1 = r1 - r1.mean(axis=0)
    r2 = r2 - r2.mean(axis=0)
    denom = np.linalg.norm(r1.T @ r1) * np.linalg.norm(r2.T @ r2)
    if denom == 0.0:
        raise ConfigError("CKA undefined for an all-zero (constant) matrix")
    return float(np.linalg.norm(r1.T @ r2) ** 2 / denom)


def balancedness(final_row: Sequence[float], sigma: float = 0.5) -> float:
    """Uniformity of per-class accuracies via a Gaussian affinity mean.

    beta = (1/C^2) sum_{i,j} exp(-(a_i - a_j)^2 / sigma); equals 1 exactly
    when all accuracies coincide.
    """
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    a = np.asarray(final_row, dtype=np.float64)
    if a.size == 0:
        raise ConfigError("balancedness needs at least one class accuracy")
    diffs = a[:, None] - a[None, :]
    return float(np.exp(-(diffs**2) / sigma).mean())


def ood_auc(inlier_scores, outlier_scores) -> float:
    """AUC for separating outliers from inliers by score (higher = more
    outlier-ish, e.g. distance to the nearest inlier center). Midranks handle
    ties, so swapping the two sets maps the result to 1 - AUC."""
    inlier = np.asarray(inlier_scores, dtype=np.float64).ravel()
    outlier = np.asarray(outlier_scores, dtype=np.float64).ravel()
    if inlier.size == 0 or outlier.size == 0:
        raise ConfigError("both score sets must be nonempty")
    ranks = rankdata(np.concatenate([inlier, outlier]))
    u = ranks[inlier.size :].sum() - outlier.size * (outlier.size + 1) / 2.0
    return float(u / (inlier.size * outlier.size))


def scree(features: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Descending eigenvalues of the feature covariance.

    With ``normalize`` the features are first scaled so the largest row norm
    is one. Tiny negative eigenvalues from roundoff are clipped to zero.
    """
    r = np.asarray(features, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] < 2:
        raise ConfigError("scree needs a 2-d matrix with at least two rows")
    if normalize:
        max_norm = np.linalg.norm(r, axis=1).max()
        if max_norm > 0:
            r = r / max_norm
    cov = np.cov(r, rowvar=False)
    eigvals = np.linalg.eigvalsh(cov)[::-1]
    return np.maximum(eigvals, 0.0)


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Count matrix with true classes as rows, predictions as columns
    (1-based labels)."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ConfigError("label arrays must have matching shapes")
    for name, arr in (("true", y_true), ("predicted", y_pred)):
        if arr.size and (arr.min() < 1 or arr.max() > n_classes):
            raise ConfigError(f"{name} labels must lie in 1..{n_classes}")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (y_true - 1, y_pred - 1), 1)
    return counts
