import json
from collections import Counter

import numpy as np
import pytest

from src.data.dataset import Dataset, LabelIndex, lookup_by_labels
from src.data.storage import BLOB_NAME, MANIFEST_NAME, dataset_hash, load_dataset, save_dataset
from src.utils.exceptions import FormatError, LabelError, UsageError


class TestDataset:
    def test_length_mismatch(self, tiny_spec):
        with pytest.raises(UsageError, match="poses"):
            Dataset(
                images=np.zeros((2, 16, 16)),
                expressions=[0, 1],
                poses=[0],
                subjects=[0, 0],
                domains=["source", "source"],
                sample_ids=[0, 1],
                spec=tiny_spec,
            )

    def test_arrays_are_read_only(self, tiny_dataset):
        with pytest.raises(ValueError):
            tiny_dataset.images[0, 0, 0] = 1.0
        with pytest.raises(ValueError):
            tiny_dataset.images_flat[0, 0] = 1.0

    def test_hidden_labels(self, tiny_dataset):
        hidden = tiny_dataset.subset(np.arange(5), labels_hidden=True)
        with pytest.raises(LabelError):
            hidden.expressions
        with pytest.raises(LabelError):
            hidden.poses
        assert hidden.sample(0).expression is None
        np.testing.assert_array_equal(hidden.reveal().expressions, tiny_dataset.expressions[:5])

    def test_subset_domain(self, tiny_dataset):
        part = tiny_dataset.subset([3, 1], domain="target")
        assert part.counts() == {"total": 2, "source": 0, "target": 2}
        np.testing.assert_array_equal(part.sample_ids, tiny_dataset.sample_ids[[3, 1]])
        with pytest.raises(UsageError):
            tiny_dataset.subset([0], domain="elsewhere")


class TestLookup:
    def test_singleton_bucket(self, tiny_dataset):
        position = int(tiny_dataset.index.bucket(1, 2)[0])
        single = tiny_dataset.subset([position])
        sample = lookup_by_labels(single, 1, 2, np.random.default_rng(0))
        assert sample.sample_id == tiny_dataset.sample_ids[position]

    def test_labels_match_query(self, tiny_dataset):
        rng = np.random.default_rng(1)
        for pose in range(3):
            for expression in range(3):
                sample = lookup_by_labels(tiny_dataset, pose, expression, rng)
                assert (sample.pose, sample.expression) == (pose, expression)

    def test_empty_bucket_signal(self, tiny_dataset):
        only_pose_0 = tiny_dataset.subset(np.flatnonzero(tiny_dataset.poses == 0))
        assert lookup_by_labels(only_pose_0, 1, 0, np.random.default_rng(0)) is None

    def test_out_of_range(self, tiny_dataset):
        with pytest.raises(UsageError):
            lookup_by_labels(tiny_dataset, 3, 0, np.random.default_rng(0))

    def test_uniform_draws(self, tiny_dataset):
        bucket = tiny_dataset.index.bucket(0, 0)[:4]
        four = tiny_dataset.subset(bucket)
        rng = np.random.default_rng(2)
        counts = Counter(lookup_by_labels(four, 0, 0, rng).sample_id for _ in range(1000))
        assert len(counts) == 4
        assert all(0.15 <= c / 1000 <= 0.35 for c in counts.values())

    def test_expression_fallback(self):
        index = LabelIndex(np.zeros((3, 4)), poses=[0, 0, 1], expressions=[1, 2, 1])
        rng = np.random.default_rng(0)
        assert index.draw(1, 2, rng) is None
        assert index.draw_expression(2, rng) == 1
        assert index.draw_expression(5, rng) is None


class TestStorage:
    def test_round_trip(self, tiny_dataset, tmp_path):
        save_dataset(tiny_dataset, tmp_path / "faces")
        assert load_dataset(tmp_path / "faces") == tiny_dataset

    def test_hidden_view_round_trip(self, tiny_split, tmp_path):
        _, target_train, _ = tiny_split
        save_dataset(target_train, tmp_path / "target")
        loaded = load_dataset(tmp_path / "target")
        assert loaded.labels_hidden
        assert loaded == target_train

    def test_hash_is_stable(self, tiny_dataset, tmp_path):
        save_dataset(tiny_dataset, tmp_path / "a")
        save_dataset(tiny_dataset, tmp_path / "b")
        assert dataset_hash(tmp_path / "a") == dataset_hash(tmp_path / "b")
        assert (tmp_path / "a" / BLOB_NAME).read_bytes()[:8] == b"FFACES01"

    def test_truncated_blob(self, tiny_dataset, tmp_path):
        path = save_dataset(tiny_dataset, tmp_path / "faces")
        blob = path / BLOB_NAME
        blob.write_bytes(blob.read_bytes()[:-100])
        with pytest.raises(FormatError, match="offset"):
            load_dataset(path)

    def test_count_mismatch(self, tiny_dataset, tmp_path):
        path = save_dataset(tiny_dataset, tmp_path / "faces")
        manifest = json.loads((path / MANIFEST_NAME).read_text())
        manifest["records"] = manifest["records"][:-1]
        (path / MANIFEST_NAME).write_text(json.dumps(manifest))
        with pytest.raises(FormatError, match="counts.total"):
            load_dataset(path)

    def test_bad_magic(self, tiny_dataset, tmp_path):
        path = save_dataset(tiny_dataset, tmp_path / "faces")
        blob = path / BLOB_NAME
        blob.write_bytes(b"XXXXXXXX" + blob.read_bytes()[8:])
        with pytest.raises(FormatError, match="magic"):
            load_dataset(path)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nowhere")
