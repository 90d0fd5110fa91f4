import pytest
import torch
from torch import nn

from sdaf.errors import ConfigError
from sdaf.network import (
    DeskEncoder,
    GrowingClassifier,
    ModelBundle,
    ReducedResNet18,
    build_model,
    load_checkpoint,
    save_checkpoint,
)


class TestEncoders:
    def test_desk_feature_shape(self):
        enc = DeskEncoder(feature_dim=16)
        out = enc(torch.rand(5, 3, 16, 16))
        assert out.shape == (5, 16)

    def test_desk_default_dim(self):
        assert DeskEncoder().feature_dim == 64

    def test_reduced_resnet_feature_shape(self):
        enc = ReducedResNet18(nf=20)
        assert enc.feature_dim == 160
        out = enc(torch.rand(2, 3, 32, 32))
        assert out.shape == (2, 160)

    def test_desk_features_independent_of_batch_composition(self):
        # GroupNorm has no cross-example statistics, so each row of a batch
        # must match the same image encoded alone
        enc = DeskEncoder(feature_dim=16)
        enc.eval()
        batch = torch.rand(4, 3, 16, 16)
        with torch.no_grad():
            joint = enc(batch)
            solo = torch.cat([enc(batch[i : i + 1]) for i in range(4)])
        assert torch.allclose(joint, solo, atol=1e-6)


class TestGrowingClassifier:
    def test_forward_before_growth_errors(self):
        clf = GrowingClassifier(feature_dim=8)
        with pytest.raises(ConfigError):
            clf(torch.rand(2, 8))

    def test_growth_appends_zeros_and_preserves_old_weights(self):
        clf = GrowingClassifier(feature_dim=8)
        clf.grow(4)
        with torch.no_grad():
            clf.weight.copy_(torch.randn(4, 8))
            clf.bias.copy_(torch.randn(4))
        old_w = clf.weight.detach().clone()
        old_b = clf.bias.detach().clone()
        clf.grow(6)
        assert clf.out_features == 10
        assert torch.equal(clf.weight[:4], old_w)
        assert torch.equal(clf.bias[:4], old_b)
        assert torch.equal(clf.weight[4:], torch.zeros(6, 8))
        assert torch.equal(clf.bias[4:], torch.zeros(6))

    def test_new_outputs_start_at_zero_logits(self):
        clf = GrowingClassifier(feature_dim=8)
        clf.grow(2)
        with torch.no_grad():
            clf.weight.copy_(torch.randn(2, 8))
        clf.grow(3)
        logits = clf(torch.randn(5, 8))
        assert torch.equal(logits[:, 2:], torch.zeros(5, 3))


class TestModelBundle:
    def test_expansion_bookkeeping(self, desk_model):
        m = desk_model
        assert m.classes_seen == 0
        m.expand_classifier(2)
        assert m.classes_seen == 2
        assert m.classifier.out_features == 8  # K=4 columns per class
        m.finish_stage()
        m.expand_classifier(3)
        assert m.classifier.out_features == 20

    def test_expand_twice_without_finish_errors(self, desk_model):
        desk_model.expand_classifier(1)
        with pytest.raises(ConfigError):
            desk_model.expand_classifier(1)
        desk_model.finish_stage()
        desk_model.expand_classifier(1)

    def test_expand_zero_errors(self, desk_model):
        with pytest.raises(ConfigError):
            desk_model.expand_classifier(0)

    def test_forward_features_requires_4d(self, desk_model):
        with pytest.raises(ConfigError):
            desk_model.forward_features(torch.rand(3, 16, 16))

    def test_logits_softmax_rows_sum_to_one(self, desk_model):
        desk_model.expand_classifier(2)
        feats = desk_model.forward_features(torch.rand(6, 3, 16, 16))
        probs = torch.softmax(desk_model.forward_logits(feats), dim=1)
        assert probs.shape == (6, 8)
        assert torch.allclose(probs.sum(dim=1), torch.ones(6), atol=1e-6)

    def test_identity_projector_and_predictor(self):
        # with G = P = id the projection and prediction are the raw features
        enc = DeskEncoder(feature_dim=16)
        bundle = ModelBundle(enc, nn.Identity(), nn.Identity(), K=1)
        feats = bundle.forward_features(torch.rand(3, 3, 16, 16))
        z, p = bundle.forward_projection_prediction(feats)
        assert torch.equal(z, feats)
        assert torch.equal(p, feats)

    def test_input_stats_normalization(self):
        enc = DeskEncoder(feature_dim=8)
        plain = ModelBundle(enc, nn.Identity(), nn.Identity(), K=1)
        stats = ((0.5, 0.5, 0.5), (2.0, 2.0, 2.0))
        normed = ModelBundle(enc, nn.Identity(), nn.Identity(), K=1, input_stats=stats)
        images = torch.rand(2, 3, 16, 16)
        shifted = (images - 0.5) / 2.0
        assert torch.allclose(
            normed.forward_features(images), plain.forward_features(shifted)
        )


class TestBuildModel:
    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            build_model("giant_scale")

    def test_init_seed_determinism(self):
        a = build_model("desk_scale", K=4, feature_dim=16, init_seed=3)
        b = build_model("desk_scale", K=4, feature_dim=16, init_seed=3)
        c = build_model("desk_scale", K=4, feature_dim=16, init_seed=4)
        for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(pa, pb), name
        assert any(
            not torch.equal(pa, pc)
            for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters())
        )

    def test_fork_rng_leaves_global_state_alone(self):
        torch.manual_seed(123)
        expected = torch.rand(4)
        torch.manual_seed(123)
        build_model("desk_scale", feature_dim=8, init_seed=99)
        assert torch.equal(torch.rand(4), expected)

    def test_projection_head_dims(self):
        m = build_model("desk_scale", K=4, feature_dim=16, init_seed=0)
        feats = m.forward_features(torch.rand(2, 3, 16, 16))
        z, p = m.forward_projection_prediction(feats)
        assert z.shape == (2, 128)
        assert p.shape == (2, 128)


class TestCheckpoints:
    def test_round_trip_fresh_model(self, tmp_path, desk_model):
        desk_model.expand_classifier(2)
        desk_model.finish_stage()
        path = tmp_path / "model.ckpt"
        save_checkpoint(desk_model, path)
        restored = load_checkpoint(path)
        assert restored.classes_seen == 2
        images = torch.rand(3, 3, 16, 16)
        desk_model.eval()
        restored.eval()
        with torch.no_grad():
            a = desk_model.forward_logits(desk_model.forward_features(images))
            b = restored.forward_logits(restored.forward_features(images))
        assert torch.equal(a, b)

    def test_round_trip_into_existing_model(self, tmp_path, desk_model):
        desk_model.expand_classifier(1)
        path = tmp_path / "model.ckpt"
        save_checkpoint(desk_model, path)
        other = build_model("desk_scale", K=4, feature_dim=16, init_seed=99)
        other.expand_classifier(1)
        load_checkpoint(path, other)
        for (name, pa), (_, pb) in zip(
            desk_model.named_parameters(), other.named_parameters()
        ):
            assert torch.equal(pa, pb), name

    def test_manifest_mismatch_errors(self, tmp_path, desk_model):
        desk_model.expand_classifier(1)
        path = tmp_path / "model.ckpt"
        save_checkpoint(desk_model, path)
        wrong = build_model("desk_scale", K=1, feature_dim=16, init_seed=0)
        wrong.expand_classifier(1)
        with pytest.raises(ConfigError):
            load_checkpoint(path, wrong)
