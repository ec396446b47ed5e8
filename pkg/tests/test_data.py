import gzip
import struct

import numpy as np
import pytest

from signfed.data import (
    Dataset,
    IdxFormatError,
    PartitionSpec,
    load_mnist_idx,
    partition_by_labels,
    synthetic_dataset,
)


def write_idx_pair(tmp_path, images, labels, image_magic=0x803, label_magic=0x801,
                   compress=False, truncate_images_by=0, label_count=None):
    """Write a raw (optionally gzipped) IDX image/label fixture pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    image_blob = struct.pack(">IIII", image_magic, n, rows, cols) + images.tobytes()
    if truncate_images_by:
        image_blob = image_blob[:-truncate_images_by]
    label_blob = struct.pack(">II", label_magic, label_count if label_count is not None else len(labels))
    label_blob += labels.tobytes()

    opener = gzip.open if compress else open
    suffix = ".gz" if compress else ""
    images_path = tmp_path / f"images-idx3-ubyte{suffix}"
    labels_path = tmp_path / f"labels-idx1-ubyte{suffix}"
    with opener(images_path, "wb") as f:
        f.write(image_blob)
    with opener(labels_path, "wb") as f:
        f.write(label_blob)
    return images_path, labels_path


@pytest.fixture
def two_image_fixture():
    images = np.zeros((2, 3, 4), dtype=np.uint8)
    images[0, 0, 0] = 255
    images[0, 2, 3] = 128
    images[1, 1, 1] = 17
    labels = np.array([3, 7], dtype=np.uint8)
    return images, labels


class TestLoadMnistIdx:
    def test_fixture_round_trips_exact_pixels(self, tmp_path, two_image_fixture):
        images, labels = two_image_fixture
        ds = load_mnist_idx(*write_idx_pair(tmp_path, images, labels))
        assert ds.examples.shape == (2, 12)
        np.testing.assert_array_equal(ds.labels, [3, 7])
        np.testing.assert_allclose(ds.examples[0, 0], 1.0)
        np.testing.assert_allclose(ds.examples[0, 11], 128.0 / 255.0)
        np.testing.assert_allclose(ds.examples[1, 5], 17.0 / 255.0)
        assert ds.examples.min() >= 0.0 and ds.examples.max() <= 1.0

    def test_gzipped_files_load_transparently(self, tmp_path, two_image_fixture):
        images, labels = two_image_fixture
        ds = load_mnist_idx(*write_idx_pair(tmp_path, images, labels, compress=True))
        assert len(ds) == 2

    def test_wrong_label_magic(self, tmp_path, two_image_fixture):
        images, labels = two_image_fixture
        paths = write_idx_pair(tmp_path, images, labels, label_magic=0x9999)
        with pytest.raises(IdxFormatError, match="magic"):
            load_mnist_idx(*paths)

    def test_wrong_image_magic(self, tmp_path, two_image_fixture):
        images, labels = two_image_fixture
        paths = write_idx_pair(tmp_path, images, labels, image_magic=0x801)
        with pytest.raises(IdxFormatError, match="magic"):
            load_mnist_idx(*paths)

    def test_truncated_pixels(self, tmp_path, two_image_fixture):
        images, labels = two_image_fixture
        paths = write_idx_pair(tmp_path, images, labels, truncate_images_by=5)
        with pytest.raises(IdxFormatError, match="truncated"):
            load_mnist_idx(*paths)

    def test_count_mismatch(self, tmp_path, two_image_fixture):
        images, labels = two_image_fixture
        paths = write_idx_pair(tmp_path, images, labels, label_count=3)
        with pytest.raises(IdxFormatError, match="count"):
            load_mnist_idx(*paths)

    def test_official_train_set_if_available(self, monkeypatch, tmp_path):
        import os

        data_dir = os.environ.get("SIGNFED_DATA_DIR")
        if not data_dir:
            pytest.skip("SIGNFED_DATA_DIR not set; full MNIST files unavailable here")
        from pathlib import Path

        base = Path(data_dir)
        candidates = [base / "train-images-idx3-ubyte", base / "train-images-idx3-ubyte.gz"]
        images = next((p for p in candidates if p.exists()), None)
        labels = next(
            (p for p in (base / "train-labels-idx1-ubyte", base / "train-labels-idx1-ubyte.gz")
             if p.exists()), None)
        if images is None or labels is None:
            pytest.skip("train IDX files not found under SIGNFED_DATA_DIR")
        ds = load_mnist_idx(images, labels)
        assert len(ds) == 60000
        assert ds.examples.shape[1] == 784
        assert ds.labels.min() == 0 and ds.labels.max() == 9


class TestSyntheticDataset:
    def test_deterministic_per_seed(self):
        a = synthetic_dataset(12, 4, 100, 5.0, seed=21)
        b = synthetic_dataset(12, 4, 100, 5.0, seed=21)
        np.testing.assert_array_equal(a.examples, b.examples)
        np.testing.assert_array_equal(a.labels, b.labels)
        c = synthetic_dataset(12, 4, 100, 5.0, seed=22)
        assert not np.array_equal(a.examples, c.examples)

    def test_values_in_unit_interval_and_balanced(self):
        ds = synthetic_dataset(8, 5, 500, 3.0, seed=1)
        assert ds.examples.min() >= 0.0 and ds.examples.max() <= 1.0
        counts = np.bincount(ds.labels, minlength=5)
        assert counts.max() - counts.min() <= 1

    def test_zero_separation_is_unlearnable(self):
        from sklearn.linear_model import LogisticRegression

        ds = synthetic_dataset(10, 4, 1200, 0.0, seed=2)
        model = LogisticRegression(max_iter=500).fit(ds.examples[:800], ds.labels[:800])
        accuracy = model.score(ds.examples[800:], ds.labels[800:])
        assert abs(accuracy - 0.25) < 0.1

    def test_large_separation_is_linearly_learnable(self):
        # centralized baseline oracle, independent of any signfed model code
        from sklearn.linear_model import LogisticRegression

        ds = synthetic_dataset(10, 4, 1200, 10.0, seed=3)
        model = LogisticRegression(max_iter=500).fit(ds.examples[:800], ds.labels[:800])
        assert model.score(ds.examples[800:], ds.labels[800:]) > 0.95

    def test_needs_one_example_per_class(self):
        with pytest.raises(ValueError):
            synthetic_dataset(4, 10, 5, 1.0, seed=0)


def make_labeled_dataset(counts, dim=4, seed=0):
    """Dataset with exactly counts[k] examples of label k."""
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.full(c, k) for k, c in enumerate(counts)])
    return Dataset(rng.random((len(labels), dim)), labels, len(counts))


class TestPartitionByLabels:
    def test_single_party_gets_everything(self):
        ds = make_labeled_dataset([5, 6, 7])
        parts = partition_by_labels(ds, PartitionSpec(1, 3, seed=0))
        assert len(parts) == 1
        assert len(parts[0]) == len(ds)

    def test_disjoint_union_subset(self):
        ds = synthetic_dataset(6, 10, 400, 2.0, seed=5)
        # tag each example uniquely through its first feature
        ds.examples[:, 0] = np.arange(400) / 400.0
        parts = partition_by_labels(ds, PartitionSpec(7, 3, seed=1))
        tags = np.concatenate([p.examples[:, 0] for p in parts])
        assert len(tags) == len(np.unique(tags))
        assert set(np.round(tags * 400).astype(int)) <= set(range(400))

    def test_each_party_has_exact_label_count(self):
        ds = synthetic_dataset(6, 10, 1000, 2.0, seed=6)
        for c in (1, 2, 4, 10):
            parts = partition_by_labels(ds, PartitionSpec(31, c, seed=2))
            for p in parts:
                assert len(np.unique(p.labels)) == c

    def test_deterministic_per_spec_seed(self):
        ds = synthetic_dataset(6, 10, 300, 2.0, seed=7)
        a = partition_by_labels(ds, PartitionSpec(5, 2, seed=3))
        b = partition_by_labels(ds, PartitionSpec(5, 2, seed=3))
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa.examples, pb.examples)

    def test_31_parties_single_label_split_evenly(self):
        counts = [97, 103, 100, 101, 99, 104, 96, 100, 102, 98]
        ds = make_labeled_dataset(counts, seed=8)
        parts = partition_by_labels(ds, PartitionSpec(31, 1, seed=4))
        label_totals = {k: 0 for k in range(10)}
        holder_sizes: dict[int, list[int]] = {k: [] for k in range(10)}
        for p in parts:
            held = np.unique(p.labels)
            assert len(held) == 1
            label = int(held[0])
            label_totals[label] += len(p)
            holder_sizes[label].append(len(p))
        for label, total in label_totals.items():
            assert total == counts[label]
            sizes = holder_sizes[label]
            assert max(sizes) - min(sizes) <= 1

    def test_rejects_too_many_labels_per_party(self):
        ds = make_labeled_dataset([5, 5])
        with pytest.raises(ValueError):
            partition_by_labels(ds, PartitionSpec(2, 3, seed=0))

    def test_all_labels_covered_when_slots_suffice(self):
        ds = synthetic_dataset(6, 10, 600, 2.0, seed=9)
        parts = partition_by_labels(ds, PartitionSpec(31, 4, seed=5))
        covered = set()
        for p in parts:
            covered.update(np.unique(p.labels).tolist())
        assert covered == set(range(10))


class TestDatasetValidation:
    def test_rejects_label_out_of_range(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 3)), np.array([0, 5]), 3)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((0, 3)), np.zeros(0, dtype=int), 3)


class TestPartitionSpecValidation:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            PartitionSpec(0, 1, 0)
        with pytest.raises(ValueError):
            PartitionSpec(1, 0, 0)
        with pytest.raises(ValueError):
            PartitionSpec(1, 1, -5)
