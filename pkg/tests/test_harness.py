import json

import numpy as np
import pytest
import torch

from sdaf.augment import AugmentRng, RandomPipelineConfig
from sdaf.errors import ConfigError
from sdaf.harness import (
    EQUAL_COMPUTE_ITERATIONS,
    DatasetConfig,
    ExperimentConfig,
    RunContext,
    Seeds,
    eval_protocol,
    load_dataset,
    run_experiment,
    run_stage,
    train_iteration,
)
from sdaf.memory import ReplayMemory
from sdaf.network import build_model
from sdaf.stream import StreamBatch

from conftest import make_examples


def _tiny_config(**overrides) -> ExperimentConfig:
    base = dict(
        method="SDAF",
        memory_size=20,
        stages=2,
        batch_size=5,
        retrieval_size=5,
        lr=1e-3,
        feature_dim=16,
        dataset=DatasetConfig(
            kind="synthetic",
            n_classes=2,
            train_per_class=10,
            test_per_class=5,
            image_size=16,
            noise=0.05,
            seed=0,
        ),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def _make_context(cfg: ExperimentConfig, classes: int = 2, c_old: int = 0) -> RunContext:
    from sdaf.harness import _train_bank

    model = build_model(
        cfg.encoder_preset, K=cfg.model_k, feature_dim=cfg.feature_dim,
        init_seed=cfg.seeds.init,
    )
    model.expand_classifier(classes)
    return RunContext(
        cfg=cfg,
        loss_cfg=cfg.loss_config(),
        model=model,
        optimizer=torch.optim.SGD(model.parameters(), lr=cfg.lr),
        pipeline=cfg.pipeline,
        train_bank=_train_bank(cfg),
        aug_rng=AugmentRng(cfg.seeds.augmentation),
        wabs_rng=torch.Generator().manual_seed(cfg.seeds.wabs),
        c_old=c_old,
    )


class TestConfig:
    def test_round_trip(self):
        cfg = _tiny_config(dump_subsample=7, seeds=Seeds(class_order=3, wabs=1))
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg

    def test_save_load(self, tmp_path):
        cfg = _tiny_config()
        path = cfg.save(tmp_path / "config.json")
        assert ExperimentConfig.load(path) == cfg

    def test_unknown_fields_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"learning_rate": 0.1})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"seeds": {"bogus": 1}})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"dataset": {"kind": "synthetic", "path": "x"}})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"pipeline": {"medium": {}}})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"pipeline": {"long": {"zoom": 2}}})

    def test_partial_pipeline_dict_keeps_defaults(self):
        cfg = ExperimentConfig.from_dict({"pipeline": {"long": {"flip_prob": 0.9}}})
        defaults = RandomPipelineConfig()
        assert cfg.pipeline.long.flip_prob == 0.9
        assert cfg.pipeline.long.crop_area == defaults.long.crop_area
        assert cfg.pipeline.short == defaults.short

    def test_equal_compute_defaults(self):
        expected = {
            "SDAF": 1, "SDAF_ALIGN": 1,
            "SCR": 4, "SCL": 4, "SDAF_IDENTITY": 4,
            "ER": 8, "FINETUNE": 8,
        }
        assert EQUAL_COMPUTE_ITERATIONS == expected
        for method, iters in expected.items():
            assert ExperimentConfig(method=method).resolved_iterations == iters

    def test_iterations_override(self):
        assert ExperimentConfig(method="ER", iterations=2).resolved_iterations == 2

    def test_model_k(self):
        assert ExperimentConfig(method="SDAF", sda_k=4).model_k == 4
        for method in ("SDAF_ALIGN", "SDAF_IDENTITY", "SCR", "SCL", "ER", "FINETUNE"):
            assert ExperimentConfig(method=method, sda_k=4).model_k == 1

    def test_validation(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(method="AGEM")
        with pytest.raises(ConfigError):
            ExperimentConfig(memory_size=-1)
        with pytest.raises(ConfigError):
            ExperimentConfig(stages=0)
        with pytest.raises(ConfigError):
            ExperimentConfig(iterations=0)
        with pytest.raises(ConfigError):
            ExperimentConfig(ncm_metric="cosine")
        with pytest.raises(ConfigError):
            DatasetConfig(kind="blob")


class TestEvalProtocol:
    def test_full_method_uses_rotation_bank(self):
        p = eval_protocol(_tiny_config(method="SDAF"))
        assert p.use_ncm and p.bank.K == 4
        assert p.metric == "mahalanobis" and not p.normalize

    def test_align_variant_matches(self):
        p = eval_protocol(_tiny_config(method="SDAF_ALIGN", ncm_metric="euclidean"))
        assert p.use_ncm and p.bank.K == 4 and p.metric == "euclidean"

    def test_identity_variant(self):
        p = eval_protocol(_tiny_config(method="SDAF_IDENTITY"))
        assert p.use_ncm and p.bank.K == 1 and not p.normalize

    def test_contrastive_baselines_hardwired(self):
        for method in ("SCR", "SCL"):
            p = eval_protocol(_tiny_config(method=method, ncm_metric="mahalanobis"))
            assert p.use_ncm and p.bank.K == 1
            assert p.metric == "euclidean" and p.normalize

    def test_softmax_baselines(self):
        for method in ("ER", "FINETUNE"):
            p = eval_protocol(_tiny_config(method=method))
            assert not p.use_ncm and p.bank is None

    def test_force_ncm_on_softmax_baseline(self):
        p = eval_protocol(_tiny_config(method="ER", force_ncm=True))
        assert p.use_ncm and p.bank.K == 1 and not p.normalize


class TestTrainIteration:
    def test_zero_lr_leaves_parameters_bitwise_unchanged(self):
        ctx = _make_context(_tiny_config(lr=0.0))
        before = [p.detach().clone() for p in ctx.model.parameters()]
        train_iteration(make_examples(5, n_classes=2, size=16), ctx)
        for old, new in zip(before, ctx.model.parameters()):
            assert torch.equal(old, new)

    def test_parts_schema_per_method(self):
        union = make_examples(5, n_classes=2, size=16)
        for method in ("SDAF", "SCR", "SCL", "ER", "FINETUNE"):
            cfg = _tiny_config(method=method)
            parts = train_iteration(union, _make_context(cfg))
            assert set(parts) == {"l_wabs", "l_ss", "gamma"}
            if method != "SDAF":
                assert parts["l_ss"] == 0.0 and parts["gamma"] == 1.0

    def test_empty_union_errors(self):
        with pytest.raises(ConfigError):
            train_iteration([], _make_context(_tiny_config()))

    def test_repeated_steps_reduce_loss(self):
        ctx = _make_context(_tiny_config(method="ER", lr=0.05))
        union = make_examples(8, n_classes=2, size=16, seed=3)
        first = train_iteration(union, ctx)["l_wabs"]
        for _ in range(29):
            last = train_iteration(union, ctx)["l_wabs"]
        assert last < first

    def test_sdaf_step_changes_parameters(self):
        ctx = _make_context(_tiny_config(lr=1e-3))
        before = [p.detach().clone() for p in ctx.model.parameters()]
        train_iteration(make_examples(5, n_classes=2, size=16), ctx)
        assert any(
            not torch.equal(old, new)
            for old, new in zip(before, ctx.model.parameters())
        )


class _RecordingMemory(ReplayMemory):
    """Records the reservoir's fill level at each retrieval."""

    def __init__(self, capacity, seed=0):
        super().__init__(capacity, seed=seed)
        self.sizes_at_retrieve = []

    def retrieve(self, m):
        self.sizes_at_retrieve.append(len(self))
        return super().retrieve(m)


class TestRunStage:
    def _batches(self, n_batches, batch_size=5, stage=1):
        return [
            StreamBatch(
                examples=make_examples(batch_size, n_classes=2, size=16, seed=b),
                stage_index=stage,
                batch_index=b + 1,
            )
            for b in range(n_batches)
        ]

    def test_step_count_is_batches_times_iterations(self):
        for method, expected_iters in (("SDAF", 1), ("SCL", 4)):
            cfg = _tiny_config(method=method)
            ctx = _make_context(cfg)
            memory = ReplayMemory(50, seed=0)
            log, steps = run_stage(ctx, memory, iter(self._batches(3)))
            assert steps == 3 * expected_iters
            assert len(log) == steps

    def test_memory_update_happens_after_iterations(self):
        # every retrieval during batch u sees only batches 1..u-1
        cfg = _tiny_config(method="SCL")  # I = 4
        ctx = _make_context(cfg)
        memory = _RecordingMemory(100, seed=0)
        run_stage(ctx, memory, iter(self._batches(3)))
        assert memory.sizes_at_retrieve == [0, 0, 0, 0, 5, 5, 5, 5, 10, 10, 10, 10]
        assert memory.seen_count == 15

    def test_log_schema_and_indices(self):
        cfg = _tiny_config(method="SDAF")
        ctx = _make_context(cfg)
        log, _ = run_stage(ctx, ReplayMemory(20, seed=0), iter(self._batches(2, stage=3)))
        assert [line["u"] for line in log] == [1, 2]
        for line in log:
            assert set(line) == {"stage", "u", "iter", "l_wabs", "l_ss", "gamma"}
            assert line["stage"] == 3
            assert line["iter"] == 1


class TestRunExperiment:
    def test_tiny_run_report_and_accounting(self):
        cfg = _tiny_config()
        result = run_experiment(cfg)
        assert result.accuracy_matrix.class_counts == (1, 2)
        # 10 images per stage, batches of 5, I=1
        assert result.gradient_steps == 4
        assert result.report["examples_offered"] == 20
        assert result.report["gradient_steps"] == 4
        assert result.report["forgetting"] is not None
        assert result.report["stages"] == 2
        assert len(result.report["wall_clock_per_stage"]) == 2
        assert set(result.dumps) == {(1, 1), (1, 2), (2, 1), (2, 2)}
        for feats in result.dumps.values():
            assert feats.shape == (5, 16) and feats.dtype == np.float32
        conf = np.array(result.report["confusion_final"])
        assert conf.shape == (2, 2) and conf.sum() == 10

    def test_cka_report_structure(self):
        result = run_experiment(_tiny_config())
        cka = result.report["cka"]
        assert {tuple(pair[:2]) for pair in cka["pairs"]} == {(1, 1), (1, 2)}
        seen = [p[2] for p in cka["pairs"] if p[1] <= p[0]]
        unseen = [p[2] for p in cka["pairs"] if p[1] > p[0]]
        assert cka["seen"] == pytest.approx(np.mean(seen))
        assert cka["unseen"] == pytest.approx(np.mean(unseen))

    def test_equal_compute_accounting_er(self):
        result = run_experiment(_tiny_config(method="ER", lr=0.1))
        # same stream, I = 8
        assert result.gradient_steps == 32
        for line in result.losses:
            assert line["l_ss"] == 0.0 and line["gamma"] == 1.0

    def test_results_directory_layout(self, tmp_path):
        out = tmp_path / "run"
        result = run_experiment(_tiny_config(), out_dir=out)
        assert (out / "config.json").exists()
        assert (out / "accuracy_matrix.json").exists()
        assert (out / "report.json").exists()
        assert (out / "memory.blob").exists()
        assert (out / "model.npz").exists() and (out / "model.json").exists()
        for t in (1, 2):
            for dt in (1, 2):
                assert (out / "dumps" / f"stage{t}_data{dt}.f32").exists()
                sidecar = json.loads(
                    (out / "dumps" / f"stage{t}_data{dt}.json").read_text()
                )
                assert sidecar["stage"] == t and sidecar["dataset_stage"] == dt
        lines = (out / "losses.jsonl").read_text().splitlines()
        assert len(lines) == result.gradient_steps
        assert set(json.loads(lines[0])) == {"stage", "u", "iter", "l_wabs", "l_ss", "gamma"}
        saved_matrix = json.loads((out / "accuracy_matrix.json").read_text())
        assert saved_matrix["class_counts"] == [1, 2]
        assert not (out / "FAILED.json").exists()

    def test_no_memory_blob_for_empty_memory(self, tmp_path):
        out = tmp_path / "run"
        run_experiment(_tiny_config(method="FINETUNE", memory_size=0, lr=0.1), out_dir=out)
        assert not (out / "memory.blob").exists()

    def test_dump_flag_off(self):
        result = run_experiment(_tiny_config(dump_representations=False))
        assert result.dumps == {}
        assert result.report["cka"] is None

    def test_dump_subsample(self):
        result = run_experiment(_tiny_config(dump_subsample=3))
        for feats in result.dumps.values():
            assert feats.shape == (3, 16)

    def test_failed_marker_on_missing_test_class(self, tmp_path):
        cfg = _tiny_config()
        train, test = load_dataset(cfg.dataset)
        broken = [ex for ex in test if ex.raw_label != 2]
        out = tmp_path / "run"
        with pytest.raises(ConfigError):
            run_experiment(cfg, out_dir=out, data=(train, broken))
        marker = json.loads((out / "FAILED.json").read_text())
        assert marker["failed_at_stage"] in (1, 2)
        assert "class" in marker["error"]

    def test_force_ncm_er_run(self):
        result = run_experiment(_tiny_config(method="ER", lr=0.1, force_ncm=True))
        assert result.accuracy_matrix.stages == 2

    def test_determinism(self):
        cfg = _tiny_config()
        a = run_experiment(cfg)
        b = run_experiment(cfg)
        assert a.accuracy_matrix.rows == b.accuracy_matrix.rows
        assert a.losses == b.losses
        for key in a.dumps:
            assert np.array_equal(a.dumps[key], b.dumps[key])

    def test_class_order_seed_changes_schedule(self):
        orders = {
            tuple(run_experiment(
                _tiny_config(
                    stages=2,
                    seeds=Seeds(class_order=s),
                    dataset=DatasetConfig(
                        kind="synthetic", n_classes=4, train_per_class=5,
                        test_per_class=2, image_size=16, noise=0.05, seed=0,
                    ),
                )
            ).schedule.stages[0])
            for s in range(6)
        }
        assert len(orders) > 1
