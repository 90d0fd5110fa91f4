"""Experiment orchestration: the streaming training loop and its artifacts.

One experiment is a single sequential pass over a class-incremental stream.
Per stage: the classifier head grows for the incoming classes, then for each
stream batch the method takes ``I`` gradient steps, each on the union of the
batch with a fresh uniform draw from replay memory, and only afterwards
offers the batch to the reservoir. After the stage, the model is evaluated on
the test split of every class seen so far and the encoder's features of every
stage's test split are dumped for representation-similarity analysis.

Equal-compute protocol: ``I`` defaults per method (1 for the full method and
its align variant, 4 for the contrastive baselines and the identity variant,
8 for the replay/fine-tune baselines) so that methods with different
per-step costs consume comparable total compute.

All randomness flows through named seeds, so a run is a pure function of
(config, dataset); two runs with the same inputs produce byte-identical
accuracy matrices and loss logs.

Loss log lines always carry {stage, u, iter, l_wabs, l_ss, gamma}; methods
without a view loss or keep rate log 0.0 / 1.0 there so one schema covers
every method.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from sdaf import metrics as metrics_mod
from sdaf import ncm
from sdaf.augment import (
    AugmentRng,
    RandomPipelineConfig,
    SdaConfig,
    SeriesParams,
    identity_sda,
    make_views_scl,
    make_views_scr,
    make_views_sda,
    rotation_sda,
)
from sdaf.errors import ConfigError
from sdaf.io import save_feature_dump
from sdaf.memory import ReplayMemory
from sdaf.network import ModelBundle, build_model, save_checkpoint
from sdaf.objectives import (
    METHODS,
    LossConfig,
    baseline_ce_loss,
    supcon_loss,
    total_loss,
)
from sdaf.stream import (
    LabeledExample,
    StageSchedule,
    build_schedule,
    load_blob_dataset,
    load_directory_dataset,
    stream_batches,
)
from sdaf.synth import SyntheticSpec, make_synthetic_dataset

EQUAL_COMPUTE_ITERATIONS = {
    "SDAF": 1,
    "SDAF_ALIGN": 1,
    "SCR": 4,
    "SCL": 4,
    "SDAF_IDENTITY": 4,
    "ER": 8,
    "FINETUNE": 8,
}

# methods whose training loss needs no classifier head
_CONTRASTIVE_ONLY = ("SCR", "SCL")
_SOFTMAX_EVAL = ("ER", "FINETUNE")


@dataclass(frozen=True)
class Seeds:
    class_order: int = 0
    init: int = 0
    augmentation: int = 0
    wabs: int = 0
    memory: int = 0


@dataclass(frozen=True)
class DatasetConfig:
    """Where the stream's images come from.

    ``synthetic`` generates oriented-grating classes in-process; ``blob``
    points at packed image blobs; ``directory`` at per-class image folders.
    """

    kind: str = "synthetic"
    n_classes: int = 4
    train_per_class: int = 250
    test_per_class: int = 50
    image_size: int = 32
    noise: float = 0.05
    seed: int = 0
    train_path: str | None = None
    test_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "blob", "directory"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind != "synthetic" and (not self.train_path or not self.test_path):
            raise ConfigError(f"dataset kind {self.kind!r} needs train/test paths")


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "SDAF"
    memory_size: int = 500
    stages: int = 2
    batch_size: int = 10
    retrieval_size: int = 10
    iterations: int | None = None
    lr: float = 0.1
    sda_k: int = 4
    lambda_ss: float = 1.5
    tau_w: float = 0.5
    supcon_temperature: float = 0.07
    encoder_preset: str = "desk_scale"
    feature_dim: int | None = None
    ncm_metric: str = "mahalanobis"
    force_ncm: bool = False
    shuffle_within_stage: bool = True
    dump_representations: bool = True
    dump_subsample: int | None = None
    seeds: Seeds = field(default_factory=Seeds)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    pipeline: RandomPipelineConfig = field(default_factory=RandomPipelineConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.memory_size < 0:
            raise ConfigError("memory_size must be >= 0")
        if self.stages < 1 or self.batch_size < 1 or self.retrieval_size < 0:
            raise ConfigError("stages/batch_size/retrieval_size out of range")
        if self.iterations is not None and self.iterations < 1:
            raise ConfigError("iterations must be >= 1 when given")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.ncm_metric not in ("mahalanobis", "euclidean"):
            raise ConfigError(f"unknown ncm_metric {self.ncm_metric!r}")

    @property
    def resolved_iterations(self) -> int:
        """Equal-compute default unless explicitly overridden."""
        if self.iterations is not None:
            return self.iterations
        return EQUAL_COMPUTE_ITERATIONS[self.method]

    @property
    def model_k(self) -> int:
        """Width multiplier of the classifier's label space."""
        return self.sda_k if self.method == "SDAF" else 1

    def loss_config(self) -> LossConfig:
        return LossConfig(
            method=self.method,
            lambda_ss=self.lambda_ss,
            tau_w=self.tau_w,
            supcon_temperature=self.supcon_temperature,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        payload = dict(payload)
        for key, sub_cls in (("seeds", Seeds), ("dataset", DatasetConfig)):
            if key in payload and isinstance(payload[key], dict):
                known = {f.name for f in dataclasses.fields(sub_cls)}
                extra = set(payload[key]) - known
                if extra:
                    raise ConfigError(f"unknown {key} fields: {sorted(extra)}")
                payload[key] = sub_cls(**payload[key])
        if "pipeline" in payload and isinstance(payload["pipeline"], dict):
            payload["pipeline"] = _pipeline_from_dict(payload["pipeline"])
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(payload) - known
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        return cls(**payload)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _pipeline_from_dict(payload: dict) -> RandomPipelineConfig:
    """Rebuild pipeline settings from config JSON; omitted fields keep their
    defaults."""
    known = {f.name for f in dataclasses.fields(SeriesParams)}
    defaults = RandomPipelineConfig()
    series = {}
    for name in ("long", "short"):
        fields = dict(payload.get(name, {}))
        extra = set(fields) - known
        if extra:
            raise ConfigError(f"unknown pipeline.{name} fields: {sorted(extra)}")
        for tup in ("crop_area", "aspect_ratio_log"):
            if tup in fields:
                fields[tup] = tuple(fields[tup])
        series[name] = dataclasses.replace(getattr(defaults, name), **fields)
    extra = set(payload) - {"long", "short"}
    if extra:
        raise ConfigError(f"unknown pipeline fields: {sorted(extra)}")
    return RandomPipelineConfig(**series)


@dataclass(frozen=True)
class EvalProtocol:
    """How a method is scored at stage boundaries."""

    use_ncm: bool
    bank: SdaConfig | None
    metric: str
    normalize: bool


def eval_protocol(cfg: ExperimentConfig) -> EvalProtocol:
    """Per-method evaluation convention.

    The full method and its variants classify by nearest class mean under
    the configured metric (the identity variant has no transform bank). The
    contrastive baselines follow their cited convention: normalized features,
    Euclidean distance, no transform bank. Replay/fine-tune baselines use
    their softmax head unless ``force_ncm`` isolates representation quality.
    """
    method = cfg.method
    if method in ("SDAF", "SDAF_ALIGN"):
        return EvalProtocol(True, rotation_sda(cfg.sda_k), cfg.ncm_metric, False)
    if method == "SDAF_IDENTITY":
        return EvalProtocol(True, identity_sda(), cfg.ncm_metric, False)
    if method in _CONTRASTIVE_ONLY:
        return EvalProtocol(True, identity_sda(), "euclidean", True)
    if cfg.force_ncm:
        return EvalProtocol(True, identity_sda(), cfg.ncm_metric, False)
    return EvalProtocol(False, None, cfg.ncm_metric, False)


@dataclass
class RunContext:
    """Everything one gradient step needs besides the union batch."""

    cfg: ExperimentConfig
    loss_cfg: LossConfig
    model: ModelBundle
    optimizer: torch.optim.Optimizer
    pipeline: RandomPipelineConfig
    train_bank: SdaConfig | None
    aug_rng: AugmentRng
    wabs_rng: torch.Generator
    c_old: int = 0


@dataclass
class RunResult:
    config: ExperimentConfig
    schedule: StageSchedule
    accuracy_matrix: metrics_mod.AccuracyMatrix
    losses: list[dict]
    report: dict
    dumps: dict[tuple[int, int], np.ndarray]
    memory: ReplayMemory
    model: ModelBundle
    stage_seconds: list[float]
    gradient_steps: int
    out_dir: Path | None


def _train_bank(cfg: ExperimentConfig) -> SdaConfig | None:
    if cfg.method in ("SDAF", "SDAF_ALIGN"):
        return rotation_sda(cfg.sda_k)
    if cfg.method == "SDAF_IDENTITY":
        return identity_sda()
    return None


def train_iteration(union: list[LabeledExample], ctx: RunContext) -> dict:
    """One SGD step on the method's loss over the union batch.

    Returns the logged loss components {l_wabs, l_ss, gamma}.
    """
    if not union:
        raise ConfigError("union batch must be nonempty")
    cfg = ctx.cfg
    ctx.model.train()
    ctx.optimizer.zero_grad()
    if cfg.method in ("SDAF", "SDAF_ALIGN", "SDAF_IDENTITY"):
        views = make_views_sda(
            union,
            ctx.train_bank,
            ctx.pipeline,
            ctx.aug_rng,
            align_labels=cfg.method == "SDAF_ALIGN",
        )
        loss, parts = total_loss(views, ctx.model, ctx.loss_cfg, ctx.c_old, ctx.wabs_rng)
    elif cfg.method == "SCR":
        views = make_views_scr(union, ctx.pipeline, ctx.aug_rng)
        loss = supcon_loss(views, ctx.model, ctx.loss_cfg.supcon_temperature)
        parts = {"l_wabs": float(loss.detach()), "l_ss": 0.0, "gamma": 1.0}
    elif cfg.method == "SCL":
        views = make_views_scl(union, ctx.pipeline, ctx.aug_rng)
        loss = supcon_loss(views, ctx.model, ctx.loss_cfg.supcon_temperature)
        parts = {"l_wabs": float(loss.detach()), "l_ss": 0.0, "gamma": 1.0}
    elif cfg.method in ("ER", "FINETUNE"):
        images = torch.stack([ex.image for ex in union])
        labels = torch.tensor([ex.label for ex in union], dtype=torch.long)
        logits = ctx.model.forward_logits(ctx.model.forward_features(images))
        loss = baseline_ce_loss(logits, labels)
        parts = {"l_wabs": float(loss.detach()), "l_ss": 0.0, "gamma": 1.0}
    else:  # pragma: no cover - guarded by config validation
        raise ConfigError(f"unknown method {cfg.method!r}")
    loss.backward()
    ctx.optimizer.step()
    return parts


def run_stage(
    ctx: RunContext,
    memory: ReplayMemory,
    stage_batches,
) -> tuple[list[dict], int]:
    """Algorithm loop for one stage: per batch, ``I`` iterations each with a
    fresh memory draw, then the reservoir update. The classifier must already
    be expanded for this stage's classes."""
    cfg = ctx.cfg
    log: list[dict] = []
    steps = 0
    for batch in stage_batches:
        for i in range(1, cfg.resolved_iterations + 1):
            retrieved = memory.retrieve(cfg.retrieval_size)
            union = list(batch.examples) + retrieved
            parts = train_iteration(union, ctx)
            steps += 1
            log.append(
                {
                    "stage": batch.stage_index,
                    "u": batch.batch_index,
                    "iter": i,
                    "l_wabs": parts["l_wabs"],
                    "l_ss": parts["l_ss"],
                    "gamma": parts["gamma"],
                }
            )
        memory.update(batch.examples)
    return log, steps


def _remap_examples(
    examples: list[LabeledExample], schedule: StageSchedule
) -> list[LabeledExample]:
    out = []
    for ex in examples:
        out.append(
            LabeledExample(
                image=ex.image,
                label=schedule.remap[ex.raw_label],
                example_id=ex.example_id,
                raw_label=ex.raw_label,
            )
        )
    return out


def _evaluate(
    cfg: ExperimentConfig,
    model: ModelBundle,
    memory: ReplayMemory,
    test_by_class: dict[int, list[LabeledExample]],
    seen: int,
) -> tuple[tuple[float, ...], np.ndarray, np.ndarray]:
    """Per-class accuracies over classes 1..seen, plus flat true/pred arrays."""
    protocol = eval_protocol(cfg)
    examples = []
    for c in range(1, seen + 1):
        if not test_by_class.get(c):
            raise ConfigError(f"test split has no examples for class {c}")
        examples.extend(test_by_class[c])
    images = torch.stack([ex.image for ex in examples])
    y_true = np.array([ex.label for ex in examples], dtype=np.int64)

    if protocol.use_ncm:
        centers, state = ncm.build_inference(
            memory, model, protocol.bank, protocol.metric, normalize=protocol.normalize
        )
        y_pred = ncm.predict_batch(images, model, protocol.bank, centers, state).labels
    else:
        was_training = model.training
        model.eval()
        with torch.no_grad():
            logits = model.forward_logits(model.forward_features(images))
        if was_training:
            model.train()
        y_pred = (torch.argmax(logits, dim=1) + 1).numpy().astype(np.int64)

    row = tuple(
        float(np.mean(y_pred[y_true == c] == c)) for c in range(1, seen + 1)
    )
    return row, y_true, y_pred


def _dump_features(
    cfg: ExperimentConfig,
    model: ModelBundle,
    test_by_stage: dict[int, list[LabeledExample]],
    stage: int,
) -> dict[tuple[int, int], np.ndarray]:
    """Encoder features of each stage's test split under the current encoder."""
    dumps = {}
    for dt, examples in test_by_stage.items():
        if cfg.dump_subsample is not None and cfg.dump_subsample < len(examples):
            rng = np.random.default_rng([cfg.seeds.class_order, dt, 0xD0])
            keep = np.sort(
                rng.choice(len(examples), size=cfg.dump_subsample, replace=False)
            )
            examples = [examples[i] for i in keep]
        images = torch.stack([ex.image for ex in examples])
        feats = ncm.encode_views(images, model, identity_sda())[:, 0, :]
        dumps[(stage, dt)] = feats.astype(np.float32)
    return dumps


def _cka_report(dumps: dict[tuple[int, int], np.ndarray], stages: int) -> dict | None:
    """Contiguous-encoder CKA cells plus seen/unseen aggregates."""
    if stages < 2 or not dumps:
        return None
    pairs = []
    seen_vals, unseen_vals = [], []
    for t in range(1, stages):
        for dt in range(1, stages + 1):
            if (t, dt) not in dumps or (t + 1, dt) not in dumps:
                continue
            value = metrics_mod.linear_cka(dumps[(t, dt)], dumps[(t + 1, dt)])
            pairs.append([t, dt, value])
            (seen_vals if dt <= t else unseen_vals).append(value)
    if not pairs:
        return None
    return {
        "pairs": pairs,
        "seen": float(np.mean(seen_vals)) if seen_vals else None,
        "unseen": float(np.mean(unseen_vals)) if unseen_vals else None,
    }


def load_dataset(
    dataset_cfg: DatasetConfig,
) -> tuple[list[LabeledExample], list[LabeledExample]]:
    if dataset_cfg.kind == "synthetic":
        spec = SyntheticSpec(
            n_classes=dataset_cfg.n_classes,
            train_per_class=dataset_cfg.train_per_class,
            test_per_class=dataset_cfg.test_per_class,
            image_size=dataset_cfg.image_size,
            noise=dataset_cfg.noise,
            seed=dataset_cfg.seed,
        )
        return make_synthetic_dataset(spec)
    loader = load_blob_dataset if dataset_cfg.kind == "blob" else load_directory_dataset
    return loader(dataset_cfg.train_path), loader(dataset_cfg.test_path)


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    data: tuple[list[LabeledExample], list[LabeledExample]] | None = None,
) -> RunResult:
    """Run the full stream once and assemble every artifact.

    ``data`` overrides the config's dataset source with in-memory
    (train, test) example lists. With ``out_dir`` set, the results directory
    is written: config.json, accuracy_matrix.json, losses.jsonl, dumps/,
    memory blob, model checkpoint, and report.json. A stage failure leaves a
    FAILED.json marker behind before the error propagates.
    """
    train, test = data if data is not None else load_dataset(cfg.dataset)
    class_labels = sorted({ex.raw_label for ex in train})
    schedule = build_schedule(class_labels, cfg.stages, cfg.seeds.class_order)

    test = _remap_examples(test, schedule)
    test_by_class: dict[int, list[LabeledExample]] = {}
    for ex in test:
        test_by_class.setdefault(ex.label, []).append(ex)
    test_by_stage = {
        t: [ex for c in schedule.contiguous_classes(t) for ex in test_by_class.get(c, [])]
        for t in range(1, cfg.stages + 1)
    }

    model = build_model(
        cfg.encoder_preset,
        K=cfg.model_k,
        feature_dim=cfg.feature_dim,
        init_seed=cfg.seeds.init,
    )
    memory = ReplayMemory(cfg.memory_size, seed=cfg.seeds.memory)
    ctx = RunContext(
        cfg=cfg,
        loss_cfg=cfg.loss_config(),
        model=model,
        optimizer=torch.optim.SGD(model.parameters(), lr=cfg.lr),
        pipeline=cfg.pipeline,
        train_bank=_train_bank(cfg),
        aug_rng=AugmentRng(cfg.seeds.augmentation),
        wabs_rng=torch.Generator().manual_seed(cfg.seeds.wabs),
    )

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        cfg.save(out_path / "config.json")

    stream = stream_batches(
        train,
        schedule,
        cfg.batch_size,
        cfg.seeds.class_order,
        shuffle_within_stage=cfg.shuffle_within_stage,
    )

    rows: list[tuple[float, ...]] = []
    losses: list[dict] = []
    dumps: dict[tuple[int, int], np.ndarray] = {}
    stage_seconds: list[float] = []
    gradient_steps = 0
    final_true = final_pred = np.array([], dtype=np.int64)

    try:
        batch_iter = iter(stream)
        pending = next(batch_iter, None)
        for t in range(1, cfg.stages + 1):
            started = time.perf_counter()
            ctx.c_old = schedule.classes_seen(t - 1)
            model.expand_classifier(len(schedule.contiguous_classes(t)))

            def stage_only():
                nonlocal pending
                while pending is not None and pending.stage_index == t:
                    batch, pending = pending, next(batch_iter, None)
                    yield batch

            # rebuilt per stage: the classifier grew, so the parameter set changed
            ctx.optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr)
            stage_log, steps = run_stage(ctx, memory, stage_only())
            losses.extend(stage_log)
            gradient_steps += steps
            model.finish_stage()

            row, final_true, final_pred = _evaluate(
                cfg, model, memory, test_by_class, schedule.classes_seen(t)
            )
            rows.append(row)
            if cfg.dump_representations:
                dumps.update(_dump_features(cfg, model, test_by_stage, t))
            stage_seconds.append(time.perf_counter() - started)
    except Exception as err:
        if out_path is not None:
            marker = {"failed_at_stage": len(rows) + 1, "error": repr(err)}
            (out_path / "FAILED.json").write_text(json.dumps(marker, indent=2) + "\n")
        raise

    matrix = metrics_mod.AccuracyMatrix(tuple(rows))
    confusion = metrics_mod.confusion_matrix(
        final_true, final_pred, schedule.classes_seen(cfg.stages)
    )
    report = {
        "method": cfg.method,
        "memory_size": cfg.memory_size,
        "stages": cfg.stages,
        "seeds": dataclasses.asdict(cfg.seeds),
        "avg_incremental_accuracy": metrics_mod.avg_incremental_accuracy(matrix),
        "end_accuracy": metrics_mod.end_accuracy(matrix),
        "forgetting": metrics_mod.forgetting(matrix) if cfg.stages > 1 else None,
        "balancedness": metrics_mod.balancedness(matrix.rows[-1]),
        "cka": _cka_report(dumps, cfg.stages),
        "gradient_steps": gradient_steps,
        "examples_offered": memory.seen_count,
        "wall_clock_per_stage": stage_seconds,
        "confusion_final": confusion.tolist(),
    }

    if out_path is not None:
        matrix.save(out_path / "accuracy_matrix.json")
        with open(out_path / "losses.jsonl", "w") as fh:
            for line in losses:
                fh.write(json.dumps(line) + "\n")
        dump_dir = out_path / "dumps"
        dump_dir.mkdir(exist_ok=True)
        for (t, dt), feats in dumps.items():
            save_feature_dump(dump_dir / f"stage{t}_data{dt}.f32", feats, t, dt)
        if len(memory) > 0:
            memory.save(out_path / "memory.blob")
        save_checkpoint(model, out_path / "model.ckpt")
        (out_path / "report.json").write_text(json.dumps(report, indent=2) + "\n")

    return RunResult(
        config=cfg,
        schedule=schedule,
        accuracy_matrix=matrix,
        losses=losses,
        report=report,
        dumps=dumps,
        memory=memory,
        model=model,
        stage_seconds=stage_seconds,
        gradient_steps=gradient_steps,
        out_dir=out_path,
    )
