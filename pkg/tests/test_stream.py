import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sdaf.errors import ConfigError
from sdaf.io import save_image_blob
from sdaf.stream import (
    LabeledExample,
    build_schedule,
    dataset_from_arrays,
    load_blob_dataset,
    load_directory_dataset,
    stream_batches,
)

from conftest import make_examples


def collect(dataset, schedule, batch_size, seed, **kw):
    return list(stream_batches(dataset, schedule, batch_size, seed, **kw))


class TestSchedule:
    def test_ten_classes_five_stages(self):
        sched = build_schedule(range(1, 11), stages=5, seed=0)
        assert sched.total_stages == 5
        assert sched.classes_per_stage == 2
        assert all(len(s) == 2 for s in sched.stages)

    def test_hundred_classes_ten_stages(self):
        sched = build_schedule(range(1, 101), stages=10, seed=0)
        assert sched.total_stages == 10
        assert all(len(s) == 10 for s in sched.stages)

    def test_single_stage_degenerate(self):
        sched = build_schedule(range(1, 11), stages=1, seed=0)
        assert sched.stages[0] == tuple(sorted(sched.stages[0], key=sched.remap.get))
        assert set(sched.stages[0]) == set(range(1, 11))

    def test_disjoint_cover(self):
        sched = build_schedule(range(1, 13), stages=4, seed=9)
        seen = [c for s in sched.stages for c in s]
        assert len(seen) == len(set(seen)) == 12

    def test_remap_contiguous_in_arrival_order(self):
        sched = build_schedule([5, 17, 2, 40], stages=2, seed=1)
        arrival = [c for s in sched.stages for c in s]
        assert [sched.remap[c] for c in arrival] == [1, 2, 3, 4]

    def test_non_divisible_error(self):
        with pytest.raises(ConfigError):
            build_schedule(range(1, 11), stages=3, seed=0)

    def test_duplicate_labels_error(self):
        with pytest.raises(ConfigError):
            build_schedule([1, 1, 2, 3], stages=2, seed=0)

    def test_seed_determinism_and_variation(self):
        a = build_schedule(range(1, 11), stages=5, seed=4)
        b = build_schedule(range(1, 11), stages=5, seed=4)
        assert a.stages == b.stages
        others = [build_schedule(range(1, 11), stages=5, seed=s).stages for s in range(5)]
        assert any(s != a.stages for s in others)

    def test_classes_seen_and_contiguous(self):
        sched = build_schedule(range(1, 7), stages=3, seed=0)
        assert [sched.classes_seen(t) for t in range(4)] == [0, 2, 4, 6]
        assert sched.contiguous_classes(2) == [3, 4]


class TestStream:
    def test_batch_count_and_sizes(self):
        data = make_examples(100, n_classes=2, seed=0)
        sched = build_schedule([1, 2], stages=2, seed=0)
        batches = collect(data, sched, 10, seed=0)
        assert len(batches) == 10
        assert all(len(b) == 10 for b in batches)

    def test_each_example_exactly_once(self):
        data = make_examples(60, n_classes=3, seed=1)
        sched = build_schedule([1, 2, 3], stages=3, seed=2)
        batches = collect(data, sched, 7, seed=2)
        ids = [ex.example_id for b in batches for ex in b.examples]
        assert sorted(ids) == sorted(ex.example_id for ex in data)

    def test_partial_last_batch_kept(self):
        data = make_examples(25, n_classes=1, seed=0)
        sched = build_schedule([1], stages=1, seed=0)
        sizes = [len(b) for b in collect(data, sched, 10, seed=0)]
        assert sizes == [10, 10, 5]

    def test_labels_remapped_and_stage_consistent(self):
        data = make_examples(40, n_classes=4, seed=5)
        sched = build_schedule([1, 2, 3, 4], stages=2, seed=5)
        for batch in collect(data, sched, 10, seed=5):
            expected = set(sched.contiguous_classes(batch.stage_index))
            assert set(ex.label for ex in batch.examples) <= expected
            for ex in batch.examples:
                assert sched.remap[ex.raw_label] == ex.label

    def test_determinism(self):
        data = make_examples(50, n_classes=2, seed=0)
        sched = build_schedule([1, 2], stages=2, seed=1)
        a = collect(data, sched, 8, seed=3)
        b = collect(data, sched, 8, seed=3)
        assert [[e.example_id for e in x.examples] for x in a] == [
            [e.example_id for e in x.examples] for x in b
        ]
        assert all(
            torch.equal(x.images(), y.images()) for x, y in zip(a, b)
        )

    def test_shuffle_flag_preserves_arrival_order(self):
        data = make_examples(20, n_classes=2, seed=0)
        sched = build_schedule([1, 2], stages=2, seed=0)
        batches = collect(data, sched, 5, seed=0, shuffle_within_stage=False)
        ids = [e.example_id for b in batches for e in b.examples]
        by_stage = sorted(ids[:10]) + sorted(ids[10:])
        assert ids == by_stage

    def test_empty_stage_error(self):
        data = [ex for ex in make_examples(20, n_classes=2, seed=0) if ex.label == 1]
        sched = build_schedule([1, 2], stages=2, seed=0)
        with pytest.raises(ConfigError):
            collect(data, sched, 5, seed=0)

    def test_stage_and_batch_indices_one_based(self):
        data = make_examples(20, n_classes=2, seed=0)
        sched = build_schedule([1, 2], stages=2, seed=0)
        batches = collect(data, sched, 5, seed=0)
        assert [(b.stage_index, b.batch_index) for b in batches] == [
            (1, 1), (1, 2), (2, 1), (2, 2),
        ]

    @settings(max_examples=20, deadline=None)
    @given(
        n_classes=st.sampled_from([2, 3, 4, 6]),
        per_class=st.integers(min_value=1, max_value=12),
        batch_size=st.integers(min_value=1, max_value=9),
        seed=st.integers(min_value=0, max_value=50),
    )
    def test_one_epoch_property(self, n_classes, per_class, batch_size, seed):
        data = make_examples(n_classes * per_class, n_classes=n_classes, size=8, seed=seed)
        stages = 2 if n_classes % 2 == 0 else n_classes
        sched = build_schedule(range(1, n_classes + 1), stages=stages, seed=seed)
        batches = collect(data, sched, batch_size, seed=seed)
        ids = [e.example_id for b in batches for e in b.examples]
        assert sorted(ids) == list(range(len(data)))
        stage_seq = [b.stage_index for b in batches]
        assert stage_seq == sorted(stage_seq)


class TestIngestion:
    def test_dataset_from_arrays_scales_to_unit_range(self):
        images = np.zeros((2, 8, 8, 3), dtype=np.uint8)
        images[1] = 255
        data = dataset_from_arrays(images, [1, 2])
        assert torch.all(data[0].image == 0.0)
        assert torch.allclose(data[1].image, torch.ones(3, 8, 8))
        assert [ex.example_id for ex in data] == [0, 1]

    def test_blob_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(5, 8, 8, 3), dtype=np.uint8)
        labels = [1, 2, 1, 3, 2]
        save_image_blob(tmp_path / "data.blob", images, labels)
        data = load_blob_dataset(tmp_path / "data.blob")
        assert [ex.raw_label for ex in data] == labels
        restored = np.stack(
            [(ex.image.permute(1, 2, 0) * 255).round().numpy() for ex in data]
        ).astype(np.uint8)
        assert np.array_equal(restored, images)

    def test_directory_dataset(self, tmp_path):
        from PIL import Image

        for cls in ("1", "2"):
            d = tmp_path / cls
            d.mkdir()
            for i in range(3):
                arr = np.full((8, 8, 3), 40 * i, dtype=np.uint8)
                Image.fromarray(arr).save(d / f"img{i}.png")
        data = load_directory_dataset(tmp_path)
        assert len(data) == 6
        assert sorted(set(ex.raw_label for ex in data)) == [1, 2]
        assert all(ex.image.shape == (3, 8, 8) for ex in data)

    def test_wrong_channel_count_rejected(self):
        with pytest.raises(ConfigError):
            LabeledExample(image=torch.zeros(1, 8, 8), label=1, example_id=0)

    def test_non_square_ingestion_rejected(self):
        images = np.zeros((2, 8, 10, 3), dtype=np.uint8)
        with pytest.raises(ConfigError):
            dataset_from_arrays(images, [1, 2])
