"""Training losses.

The full method optimises ``L_total = L_WABS + lambda * L_SS``:

- ``L_SS`` is a stop-gradient view loss: each view's prediction is pulled
  toward the (detached) projection of its partner view of the same source
  image and strong-transform index, negative cosine similarity, summed over
  every view in the batch. No negatives, no repulsion.
- ``L_WABS`` is cross-entropy over the extended label space where each
  new-class view is kept only with probability ``gamma``, a keep rate derived
  from the classifier's column magnitudes: the more the new-class columns
  outweigh the old ones, the fewer new-class views are kept.

Cross-entropy and the view loss are *sums* over kept views (any batch-size
scaling is folded into the learning rate). The supervised contrastive loss
used by the replay baselines follows its usual convention instead (mean over
anchors, temperature-scaled similarities over normalised projections).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from sdaf.augment import ViewBatch
from sdaf.errors import ConfigError
from sdaf.network import ModelBundle

METHODS = ("SDAF", "SDAF_ALIGN", "SDAF_IDENTITY", "SCR", "SCL", "ER", "FINETUNE")


@dataclass(frozen=True)
class LossConfig:
    method: str = "SDAF"
    lambda_ss: float = 1.5
    tau_w: float = 0.5
    supcon_temperature: float = 0.07

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.lambda_ss < 0:
            raise ConfigError("lambda_ss must be >= 0")
        if self.tau_w <= 0 or self.supcon_temperature <= 0:
            raise ConfigError("temperatures must be positive")


def view_loss(p_anchor: torch.Tensor, z_partner: torch.Tensor) -> torch.Tensor:
    """Negative cosine similarity with the partner branch detached.

    Accepts single vectors or row-stacked batches; returns a scalar or a
    per-row tensor accordingly. A zero-norm input is an error (the cosine is
    undefined there); otherwise norms are guarded with a 1e-12 epsilon.
    """
    if (p_anchor.norm(dim=-1) == 0).any() or (z_partner.norm(dim=-1) == 0).any():
        raise ValueError("cosine similarity undefined for zero-norm vectors")
    return -F.cosine_similarity(p_anchor, z_partner.detach(), dim=-1, eps=1e-12)


def _paired_indices(views: ViewBatch) -> tuple[torch.Tensor, torch.Tensor]:
    """Indices of the (j=1, j=2) views per (source, aug) group, aligned."""
    key = views.source_index * (int(views.aug_index.max()) + 1) + views.aug_index
    first = views.view_index == 1
    second = views.view_index == 2
    idx1 = torch.nonzero(first, as_tuple=True)[0]
    idx2 = torch.nonzero(second, as_tuple=True)[0]
    if len(idx1) != len(idx2):
        raise ConfigError("view batch has unpaired views")
    idx1 = idx1[torch.argsort(key[idx1], stable=True)]
    idx2 = idx2[torch.argsort(key[idx2], stable=True)]
    if not torch.equal(key[idx1], key[idx2]):
        raise ConfigError("view batch has unpaired views")
    return idx1, idx2


def loss_ss(views: ViewBatch, model: ModelBundle) -> torch.Tensor:
    """Stop-gradient view loss summed over every view in the batch.

    Each (source, strong-transform) group must contribute exactly one j=1 and
    one j=2 view; each view is the anchor once and the detached target once.
    """
    features = model.forward_features(views.images)
    z, p = model.forward_projection_prediction(features)
    idx1, idx2 = _paired_indices(views)
    forward = view_loss(p[idx1], z[idx2])
    backward = view_loss(p[idx2], z[idx1])
    return forward.sum() + backward.sum()


def gamma(
    classifier_weight: torch.Tensor, K: int, c_old: int, c_t: int, tau_w: float
) -> float:
    """Keep rate for new-class views, from classifier column magnitudes.

    ``w_old`` / ``w_new`` are the mean Euclidean norms of the weight columns
    belonging to old / new extended classes (bias excluded). The rate is
    ``min(1, 2 exp(w_old/tau) / (exp(w_old/tau) + exp(w_new/tau)))`` and is 1
    by definition at the first stage, where there are no old classes.
    """
    if c_t < 1:
        raise ConfigError(f"current stage must hold >= 1 classes, got {c_t}")
    if c_old == 0:
        return 1.0
    if classifier_weight.shape[0] != K * (c_old + c_t):
        raise ConfigError(
            f"classifier has {classifier_weight.shape[0]} outputs, "
            f"expected {K * (c_old + c_t)}"
        )
    # a sampling rate, not a loss term: no gradient flows through it
    norms = classifier_weight.detach().norm(dim=1)
    w_old = norms[: K * c_old].mean() / tau_w
    w_new = norms[K * c_old :].mean() / tau_w
    shift = torch.maximum(w_old, w_new)
    e_old = torch.exp(w_old - shift)
    e_new = torch.exp(w_new - shift)
    return min(1.0, float(2.0 * e_old / (e_old + e_new)))


def wabs_mask(
    labels: torch.Tensor,
    gamma_value: float,
    K: int,
    c_old: int,
    rng: torch.Generator,
) -> torch.Tensor:
    """Per-view keep mask: old-class views always kept, each new-class view
    kept iff its fresh uniform draw lands below ``gamma_value``."""
    if not (0.0 <= gamma_value <= 1.0):
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma_value}")
    draws = torch.rand(labels.shape[0], generator=rng)
    is_old = labels <= K * c_old
    return (is_old | (draws < gamma_value)).float()


def loss_wabs(
    logits: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Masked cross-entropy summed over kept views (1-based extended labels)."""
    n_out = logits.shape[1]
    if labels.min() < 1 or labels.max() > n_out:
        raise ConfigError(
            f"labels must lie in 1..{n_out}, got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    log_probs = F.log_softmax(logits, dim=1)
    picked = log_probs.gather(1, (labels - 1).unsqueeze(1)).squeeze(1)
    return -(mask * picked).sum()


def total_loss(
    views: ViewBatch,
    model: ModelBundle,
    cfg: LossConfig,
    c_old: int,
    rng: torch.Generator,
) -> tuple[torch.Tensor, dict]:
    """Full objective ``L_WABS + lambda * L_SS``.

    The keep-mask applies to the cross-entropy term only; the view loss always
    sees every view. Returns the scalar plus the logged components.
    """
    features = model.forward_features(views.images)
    z, p = model.forward_projection_prediction(features)
    idx1, idx2 = _paired_indices(views)
    l_ss = view_loss(p[idx1], z[idx2]).sum() + view_loss(p[idx2], z[idx1]).sum()

    c_t = model.classes_seen - c_old
    g = gamma(model.classifier.weight, model.K, c_old, c_t, cfg.tau_w)
    mask = wabs_mask(views.labels, g, model.K, c_old, rng)
    logits = model.forward_logits(features)
    l_wabs = loss_wabs(logits, views.labels, mask)

    total = l_wabs + cfg.lambda_ss * l_ss
    parts = {"l_wabs": float(l_wabs.detach()), "l_ss": float(l_ss.detach()), "gamma": g}
    return total, parts


def supcon_loss(
    views: ViewBatch, model: ModelBundle, temperature: float = 0.07
) -> torch.Tensor:
    """Supervised contrastive loss over normalised projections.

    For each anchor, positives are all other views sharing its label; the
    denominator runs over every other view. Anchors without positives are
    dropped; a batch where no anchor has a positive is an error. Mean over
    contributing anchors.
    """
    features = model.forward_features(views.images)
    z = model.projector(features)
    z = F.normalize(z, dim=1, eps=1e-12)
    n = z.shape[0]
    if n < 2:
        raise ConfigError("supervised contrastive loss needs at least two views")
    sim = (z @ z.t()) / temperature
    labels = views.labels
    positive = (labels.unsqueeze(0) == labels.unsqueeze(1)) & ~torch.eye(
        n, dtype=torch.bool
    )
    if not positive.any():
        raise ConfigError("no positive pair in batch")
    # log-softmax over each row, excluding the anchor itself
    off_diag = ~torch.eye(n, dtype=torch.bool)
    sim = sim - sim.max(dim=1, keepdim=True).values.detach()
    exp_sim = torch.exp(sim) * off_diag
    log_prob = sim - torch.log(exp_sim.sum(dim=1, keepdim=True))
    pos_counts = positive.sum(dim=1)
    has_pos = pos_counts > 0
    mean_log_prob_pos = (log_prob * positive).sum(dim=1)[has_pos] / pos_counts[has_pos]
    return -mean_log_prob_pos.mean()


def baseline_ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Plain mean cross-entropy on 1-based class labels (replay / fine-tune
    baselines keep their usual convention)."""
    n_out = logits.shape[1]
    if labels.min() < 1 or labels.max() > n_out:
        raise ConfigError(
            f"labels must lie in 1..{n_out}, got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    return F.cross_entropy(logits, labels - 1)
