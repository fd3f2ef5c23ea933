import numpy as np
import pytest

from privit.data import (DatasetError, DatasetSplit, gen_synthetic, load_cifar10_subset, read_cifar10_records,
                         resize_bilinear, split)


def test_synthetic_shape_and_balance():
    d = gen_synthetic(2, 10, 16, seed=1)
    assert d.images.shape == (20, 16, 16, 3)
    assert np.bincount(d.labels).tolist() == [10, 10]
    assert d.images.min() >= 0.0 and d.images.max() <= 1.0


def test_synthetic_deterministic():
    a, b = gen_synthetic(3, 5, 8, seed=4), gen_synthetic(3, 5, 8, seed=4)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, gen_synthetic(3, 5, 8, seed=5).images)


def test_nearest_centroid_beats_chance():
    train, test = gen_synthetic(4, 50, 16, seed=0), gen_synthetic(4, 50, 16, seed=1)
    flat = lambda d: d.images.reshape(len(d), -1)
    centroids = np.stack([flat(train)[train.labels == k].mean(axis=0) for k in range(4)])
    dist = ((flat(test)[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    assert np.mean(dist.argmin(axis=1) == test.labels) > 0.25 + 0.1


def test_synthetic_rejects_nonpositive():
    with pytest.raises(ValueError):
        gen_synthetic(0, 5, 8, seed=0)


def test_split_is_stratified():
    d = gen_synthetic(4, 20, 8, seed=0)
    tr, te = split(d, 0.25, seed=0)
    assert np.bincount(te.labels).tolist() == [5] * 4
    assert len(tr) + len(te) == len(d)


def test_dataset_split_validates_labels():
    with pytest.raises(ValueError):
        DatasetSplit(np.zeros((2, 4, 4, 3)), np.array([0, 3]), 3)


def test_resize_bilinear_corners_and_constant():
    img = np.zeros((1, 2, 2, 1))
    img[0, 1, 1, 0] = 1.0
    out = resize_bilinear(img, 3)
    assert out.shape == (1, 3, 3, 1)
    assert out[0, 0, 0, 0] == 0.0 and out[0, 2, 2, 0] == 1.0
    assert out[0, 1, 1, 0] == pytest.approx(0.25)
    const = np.full((2, 4, 4, 3), 0.3)
    np.testing.assert_allclose(resize_bilinear(const, 7), 0.3)


def write_batch(path, labels, fill):
    rec = np.zeros((len(labels), 3073), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = fill
    rec.tofile(path)


@pytest.fixture
def fake_cifar(tmp_path):
    labels = np.tile(np.arange(10), 12).astype(np.uint8)
    write_batch(tmp_path / "data_batch_1.bin", labels[:60], 255)
    write_batch(tmp_path / "data_batch_2.bin", labels[60:], 0)
    return tmp_path


def test_cifar_subset_balanced(fake_cifar):
    d = load_cifar10_subset(fake_cifar, per_class=10, seed=0)
    assert d.images.shape == (100, 32, 32, 3)
    assert np.bincount(d.labels, minlength=10).tolist() == [10] * 10
    assert set(np.unique(d.images)) <= {0.0, 1.0}


def test_cifar_label_and_pixel_decoding(tmp_path):
    rec = np.zeros(3073, dtype=np.uint8)
    rec[0] = 7
    rec[1] = 255           # red plane, pixel (0, 0)
    rec[1 + 1024 + 33] = 128  # green plane, pixel (1, 1)
    rec.tofile(tmp_path / "test_batch.bin")
    images, labels = read_cifar10_records([tmp_path / "test_batch.bin"])
    assert labels.tolist() == [7]
    assert images[0, 0, 0, 0] == 255 and images[0, 1, 1, 1] == 128


def test_cifar_scaling_and_resize(fake_cifar):
    d = load_cifar10_subset(fake_cifar, per_class=2, seed=1, image_size=16)
    assert d.images.shape == (20, 16, 16, 3)
    assert d.images.max() == 1.0


def test_cifar_errors(tmp_path):
    with pytest.raises(DatasetError):
        load_cifar10_subset(tmp_path, per_class=1, seed=0)
    (tmp_path / "data_batch_1.bin").write_bytes(b"\x00" * 3000)
    with pytest.raises(DatasetError, match="multiple of 3073"):
        load_cifar10_subset(tmp_path, per_class=1, seed=0)
    write_batch(tmp_path / "data_batch_1.bin", np.arange(10, dtype=np.uint8), 0)
    with pytest.raises(DatasetError, match="need 2"):
        load_cifar10_subset(tmp_path, per_class=2, seed=0)
