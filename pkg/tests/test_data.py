import numpy as np
import pytest

from densedrop.data import (
    LAYOUTS,
    AugmentPolicy,
    CorruptArchiveError,
    Dataset,
    augment,
    augment_batch,
    batch_count,
    batches,
    encode_records,
    load_cifar,
    stratified_subset,
    synthetic_cifar,
    write_cifar,
)

from conftest import tiny_dataset
from oracles import binomial_sigma

POLICY = AugmentPolicy((0.5, 0.4, 0.3), (0.25, 0.2, 0.3))


class TestLoader:
    def test_full_train_split(self, cifar_dir):
        ds = load_cifar(cifar_dir, "c10", "train")
        assert len(ds) == 50000 and ds.images.shape == (50000, 3, 32, 32)
        assert ds.labels.min() >= 0 and ds.labels.max() < 10

    def test_parent_directory(self, cifar_dir):
        assert len(load_cifar(cifar_dir.parent, "c10", "test")) == 10000

    def test_matches_source(self, cifar_dir, synthetic_splits):
        test = load_cifar(cifar_dir, "c10", "test")
        np.testing.assert_array_equal(test.images, synthetic_splits[1].images)
        np.testing.assert_array_equal(test.labels, synthetic_splits[1].labels)

    def test_first_record_round_trip(self, cifar_dir):
        raw = (cifar_dir / "data_batch_1.bin").read_bytes()
        ds = load_cifar(cifar_dir, "c10", "train")
        assert encode_records(ds.subset(np.arange(1)), "c10") == raw[: LAYOUTS["c10"].record_size]

    def test_pixel_layout(self, tmp_path):
        # Hand-built record: label 3, red plane 1s, green 2s, blue 3s except one marked pixel.
        rec = bytearray([3]) + bytes([1] * 1024) + bytes([2] * 1024) + bytes([3] * 1024)
        rec[1 + 1024 + 32 * 5 + 7] = 200  # green, row 5, column 7
        d = tmp_path / "c"
        d.mkdir()
        blank = bytes(10000 * 3073)
        (d / "test_batch.bin").write_bytes(bytes(rec) + blank[3073:])
        ds = load_cifar(d, "c10", "test")
        assert ds.labels[0] == 3
        assert ds.images[0, 0].max() == 1 and ds.images[0, 2].min() == 3
        assert ds.images[0, 1, 5, 7] == 200

    def test_truncated(self, tmp_path, cifar_dir):
        d = tmp_path / "broken"
        d.mkdir()
        (d / "test_batch.bin").write_bytes((cifar_dir / "test_batch.bin").read_bytes()[:-1])
        with pytest.raises(CorruptArchiveError, match="expected 30730000 bytes, found 30729999"):
            load_cifar(d, "c10", "test")

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_cifar(tmp_path, "c10", "test")

    def test_c100_keeps_fine_label(self, tmp_path):
        train, test = synthetic_cifar(seed=1, variant="c100")
        d = write_cifar(tmp_path / "c100", train, test, "c100")
        ds = load_cifar(d, "c100", "test")
        assert ds.num_classes == 100
        np.testing.assert_array_equal(ds.labels, test.labels)
        np.testing.assert_array_equal(ds.coarse_labels, test.labels // 5)

    def test_bad_label(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((1, 3, 32, 32), np.uint8), np.array([10]), "train", 10)


class TestAugment:
    def test_center_crop_no_flip_is_normalization(self):
        img = tiny_dataset(1).images[0]
        out = augment(img, POLICY, np.random.default_rng(0), flips=[False], offsets=[(4, 4)])
        np.testing.assert_array_equal(out, POLICY.normalize(img[None])[0])

    def test_double_flip(self):
        img = tiny_dataset(1).images[0]
        flipped = img[:, :, ::-1]
        out = augment(np.ascontiguousarray(flipped), POLICY, np.random.default_rng(0), flips=[True], offsets=[(4, 4)])
        np.testing.assert_array_equal(out, POLICY.normalize(img[None])[0])

    def test_translation_fills_with_mean(self):
        img = np.full((3, 32, 32), 77, dtype=np.uint8)
        out = augment(img, POLICY, np.random.default_rng(0), flips=[False], offsets=[(0, 8)])
        # Shifted down 4 rows and left 4 columns: top rows and right columns are padding.
        assert np.all(out[:, :4] == 0.0) and np.all(out[:, :, -4:] == 0.0)
        np.testing.assert_array_equal(out[:, 4:, :28], POLICY.normalize(img[None])[0][:, :28, 4:])

    def test_output_shape(self):
        out = augment_batch(tiny_dataset(5).images, POLICY, np.random.default_rng(0))
        assert out.shape == (5, 3, 32, 32) and out.dtype == np.float32

    def test_flip_frequency(self):
        n = 10000
        img = np.zeros((3, 32, 32), np.uint8)
        img[:, :, :16] = 255
        out = augment_batch(np.repeat(img[None], n, 0), POLICY, np.random.default_rng(3), offsets=np.full((n, 2), 4))
        flipped = out[:, 0, 0, 0] < out[:, 0, 0, -1]
        assert abs(flipped.mean() - 0.5) < 3 * binomial_sigma(0.5, n)

    def test_offsets_uniform(self):
        n = 20000
        img = np.zeros((3, 32, 32), np.uint8)
        img[0, 0, 0] = 255
        policy = AugmentPolicy((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), flip_prob=0.0)
        out = augment_batch(np.repeat(img[None], n, 0), policy, np.random.default_rng(4))
        # The corner pixel stays in view only when both offsets are <= pad: 5 of 9 each.
        hits = out[:, 0].reshape(n, -1) > 0
        visible = hits.any(axis=1)
        assert abs(visible.mean() - 25 / 81) < 3 * binomial_sigma(25 / 81, n)
        row = np.argmax(hits[visible], axis=1) // 32
        assert np.all(row <= 4)
        freq = np.bincount(row, minlength=5) / visible.sum()
        assert np.all(np.abs(freq - 0.2) < 3 * binomial_sigma(0.2, visible.sum()))

    def test_stats_from_training_split(self):
        ds = tiny_dataset(20)
        policy = AugmentPolicy.from_dataset(ds)
        x = ds.images.astype(np.float64) / 255.0
        np.testing.assert_allclose(policy.mean, x.mean(axis=(0, 2, 3)), rtol=1e-12)
        np.testing.assert_allclose(policy.std, x.std(axis=(0, 2, 3)), rtol=1e-10)
        z = policy.normalize(ds.images, np.float64)
        np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(z.std(axis=(0, 2, 3)), 1.0, atol=1e-10)


class TestBatches:
    def test_counts(self):
        sizes = batch_count(50000, 64)
        assert len(sizes) == 782 and sizes.count(64) == 781 and sizes[-1] == 16

    def test_full_split_stream(self, synthetic_splits):
        train = synthetic_splits[0]
        sizes = [len(y) for _, y in batches(train, 64, None, POLICY, train=False)]
        assert sizes == batch_count(50000, 64)

    def test_epoch_visits_every_index_once(self):
        ds = tiny_dataset(40, classes=40)
        ds = Dataset(ds.images, np.arange(40), "train", 40)
        labels = np.concatenate([y for _, y in batches(ds, 7, np.random.default_rng(1), POLICY)])
        assert sorted(labels.tolist()) == list(range(40))
        assert labels.tolist() != list(range(40))

    def test_same_seed_same_stream(self):
        ds = tiny_dataset(30)
        a = [(x.data, y) for x, y in batches(ds, 8, np.random.default_rng(5), POLICY)]
        b = [(x.data, y) for x, y in batches(ds, 8, np.random.default_rng(5), POLICY)]
        assert all(np.array_equal(x1, x2) and np.array_equal(y1, y2) for (x1, y1), (x2, y2) in zip(a, b))

    def test_test_batches_not_augmented(self):
        ds = tiny_dataset(10)
        (x, y), = list(batches(ds, 10, None, POLICY, train=False))
        np.testing.assert_array_equal(x.data, POLICY.normalize(ds.images))
        np.testing.assert_array_equal(y, ds.labels)

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            next(batches(tiny_dataset(4), 0, None, POLICY, train=False))


class TestSubset:
    def test_stratified_500_per_class(self, synthetic_splits):
        sub = stratified_subset(synthetic_splits[0], 5000, seed=0)
        assert len(sub) == 5000
        assert np.all(np.bincount(sub.labels, minlength=10) == 500)

    def test_deterministic(self, synthetic_splits):
        a = stratified_subset(synthetic_splits[0], 1000, seed=3)
        b = stratified_subset(synthetic_splits[0], 1000, seed=3)
        c = stratified_subset(synthetic_splits[0], 1000, seed=4)
        assert np.array_equal(a.images, b.images)
        assert not np.array_equal(a.images, c.images)

    def test_too_large(self):
        with pytest.raises(ValueError):
            stratified_subset(tiny_dataset(20), 30, seed=0)
