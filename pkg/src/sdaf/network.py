"""Model components: encoder, projector, predictor, growable classifier.

Two encoder presets share one interface:

- ``paper_scale``: a reduced ResNet-18 (base width 20, feature dim 160,
  batch normalization), the standard backbone for small-image online
  continual learning.
- ``desk_scale``: a small convolutional net sized for CPU test runs. It uses
  group normalization (batch-size independent, so evaluation is deterministic
  and per-view outputs do not depend on batch composition) and smooth GELU
  activations (finite-difference friendly).

The classifier head is a single linear layer over the extended label space
whose column count grows by ``K * new_class_count`` at each stage boundary;
new columns and bias entries start at zero so freshly added classes begin
with uniform logits and well-defined column norms.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from sdaf.errors import ConfigError

PRESETS = ("paper_scale", "desk_scale")


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


class _BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class ReducedResNet18(nn.Module):
    """ResNet-18 at base width ``nf=20``; feature dimension ``8 * nf = 160``."""

    def __init__(self, nf: int = 20):
        super().__init__()
        self.feature_dim = 8 * nf
        self.stem = nn.Sequential(
            nn.Conv2d(3, nf, 3, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(nf),
            nn.ReLU(inplace=True),
        )
        widths = [nf, 2 * nf, 4 * nf, 8 * nf]
        strides = [1, 2, 2, 2]
        blocks = []
        in_ch = nf
        for width, stride in zip(widths, strides):
            blocks.append(_BasicBlock(in_ch, width, stride))
            blocks.append(_BasicBlock(width, width, 1))
            in_ch = width
        self.blocks = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        out = self.blocks(self.stem(x))
        return self.pool(out).flatten(1)


class DeskEncoder(nn.Module):
    """Three GroupNorm conv stages plus a linear readout to ``feature_dim``."""

    def __init__(self, feature_dim: int = 64):
        super().__init__()
        self.feature_dim = feature_dim
        self.body = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1),
            nn.GroupNorm(4, 32),
            nn.GELU(),
            nn.AvgPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1),
            nn.GroupNorm(8, 64),
            nn.GELU(),
            nn.AvgPool2d(2),
            nn.Conv2d(64, 128, 3, padding=1),
            nn.GroupNorm(8, 128),
            nn.GELU(),
            nn.AdaptiveAvgPool2d(1),
        )
        self.readout = nn.Linear(128, feature_dim)

    def forward(self, x):
        return self.readout(self.body(x).flatten(1))


class TwoLayerMlp(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, activation: str):
        super().__init__()
        act = nn.GELU() if activation == "gelu" else nn.ReLU(inplace=True)
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim), act, nn.Linear(hidden_dim, out_dim)
        )

    def forward(self, x):
        return self.net(x)


class GrowingClassifier(nn.Module):
    """Linear head over the extended label space; columns are appended per
    stage and existing weights are never touched by an expansion."""

    def __init__(self, feature_dim: int):
        super().__init__()
        self.feature_dim = feature_dim
        self.weight = nn.Parameter(torch.zeros(0, feature_dim))
        self.bias = nn.Parameter(torch.zeros(0))

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def grow(self, new_outputs: int) -> None:
        device, dtype = self.weight.device, self.weight.dtype
        weight = torch.zeros(
            self.out_features + new_outputs, self.feature_dim, device=device, dtype=dtype
        )
        bias = torch.zeros(self.out_features + new_outputs, device=device, dtype=dtype)
        with torch.no_grad():
            weight[: self.out_features] = self.weight
            bias[: self.out_features] = self.bias
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(bias)

    def forward(self, features):
        if self.out_features == 0:
            raise ConfigError("classifier has no outputs; expand it first")
        return features @ self.weight.t() + self.bias


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------


class ModelBundle(nn.Module):
    """Encoder F, projector G, predictor P, and the growable softmax head."""

    def __init__(
        self,
        encoder: nn.Module,
        projector: nn.Module,
        predictor: nn.Module,
        K: int,
        preset: str = "custom",
        input_stats: tuple | None = None,
    ):
        super().__init__()
        self.encoder = encoder
        self.projector = projector
        self.predictor = predictor
        self.classifier = GrowingClassifier(encoder.feature_dim)
        self.K = K
        self.preset = preset
        self.classes_seen = 0
        self._expansion_allowed = True
        if input_stats is not None:
            mean, std = input_stats
            self.register_buffer("input_mean", torch.tensor(mean).view(1, 3, 1, 1))
            self.register_buffer("input_std", torch.tensor(std).view(1, 3, 1, 1))
        else:
            self.input_mean = None
            self.input_std = None

    @property
    def feature_dim(self) -> int:
        return self.encoder.feature_dim

    def forward_features(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4:
            raise ConfigError(f"expected (n, 3, h, w) images, got {tuple(images.shape)}")
        if self.input_mean is not None:
            images = (images - self.input_mean) / self.input_std
        return self.encoder(images)

    def forward_projection_prediction(
        self, features: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        z = self.projector(features)
        p = self.predictor(z)
        return z, p

    def forward_logits(self, features: torch.Tensor) -> torch.Tensor:
        return self.classifier(features)

    def expand_classifier(self, new_class_count: int) -> None:
        """Append ``K * new_class_count`` zero columns at a stage boundary."""
        if not self._expansion_allowed:
            raise ConfigError(
                "classifier already expanded this stage; call finish_stage() first"
            )
        if new_class_count < 1:
            raise ConfigError(f"new_class_count must be >= 1, got {new_class_count}")
        self.classifier.grow(self.K * new_class_count)
        self.classes_seen += new_class_count
        self._expansion_allowed = False

    def finish_stage(self) -> None:
        self._expansion_allowed = True


def build_model(
    preset: str = "desk_scale",
    K: int = 4,
    feature_dim: int | None = None,
    init_seed: int | None = None,
    input_stats: tuple | None = None,
) -> ModelBundle:
    """Construct a bundle for the given preset with seed-determined init."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {PRESETS}")

    def construct() -> ModelBundle:
        if preset == "paper_scale":
            encoder: nn.Module = ReducedResNet18(nf=20)
            act = "relu"
        else:
            encoder = DeskEncoder(feature_dim=feature_dim or 64)
            act = "gelu"
        d = encoder.feature_dim
        projector = TwoLayerMlp(d, d, 128, act)
        predictor = TwoLayerMlp(128, 128, 128, act)
        return ModelBundle(encoder, projector, predictor, K=K, preset=preset,
                           input_stats=input_stats)

    if init_seed is None:
        return construct()
    with torch.random.fork_rng():
        torch.manual_seed(init_seed)
        return construct()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: ModelBundle, path: str | Path) -> None:
    """Flat archive of named arrays plus a JSON manifest sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        name: tensor.detach().cpu().numpy()
        for name, tensor in model.state_dict().items()
    }
    np.savez(path.with_suffix(".npz"), **arrays)
    manifest = {
        "preset": model.preset,
        "d": model.feature_dim,
        "K": model.K,
        "classes_seen": model.classes_seen,
    }
    path.with_suffix(".json").write_text(json.dumps(manifest))


def load_checkpoint(path: str | Path, model: ModelBundle | None = None) -> ModelBundle:
    """Restore a bundle; a manifest that disagrees with the target model (or
    with the archive contents) is an error."""
    path = Path(path)
    npz_path = path if path.suffix == ".npz" else path.with_suffix(".npz")
    manifest = json.loads(path.with_suffix(".json").read_text())
    if model is None:
        model = build_model(
            preset=manifest["preset"], K=manifest["K"], feature_dim=manifest["d"]
        )
        for _ in range(manifest["classes_seen"]):
            model.expand_classifier(1)
            model.finish_stage()
    else:
        current = {
            "preset": model.preset,
            "d": model.feature_dim,
            "K": model.K,
            "classes_seen": model.classes_seen,
        }
        if current != manifest:
            raise ConfigError(
                f"checkpoint manifest {manifest} does not match model {current}"
            )
    with np.load(npz_path) as arrays:
        state = {name: torch.from_numpy(arrays[name]) for name in arrays.files}
    model.load_state_dict(state, strict=True)
    return model
