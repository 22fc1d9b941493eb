import gzip

import numpy as np
import pytest

from spikecodec.data import (
    DataFormatError,
    Dataset,
    augment,
    augment_batch,
    load_cifar10_bin,
    load_dataset,
    load_idx,
    load_mnist_dir,
    read_manifest,
    synth_dataset,
    write_idx,
    write_manifest,
)


def write_pair(d, n=5, gz=True, prefix="train"):
    rng = np.random.default_rng(n)
    imgs = rng.integers(0, 256, (n, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, n).astype(np.uint8)
    names = {"train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
             "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")}[prefix]
    suffix = ".gz" if gz else ""
    ip, lp = d / (names[0] + suffix), d / (names[1] + suffix)
    write_idx(ip, imgs)
    write_idx(lp, labels)
    return imgs, labels, ip, lp


@pytest.mark.parametrize("gz", [True, False])
def test_idx_round_trip(tmp_path, gz):
    imgs, labels, ip, lp = write_pair(tmp_path, gz=gz)
    assert (ip.read_bytes()[:2] == b"\x1f\x8b") == gz
    ds = load_idx(ip, lp)
    assert ds.images.shape == (5, 1, 28, 28)
    np.testing.assert_array_equal(np.round(ds.images[:, 0] * 255).astype(np.uint8), imgs)
    np.testing.assert_array_equal(ds.labels, labels)
    assert len(ds.provenance["images_sha256"]) == 64
    ds2 = load_mnist_dir(tmp_path)
    np.testing.assert_array_equal(ds2.images, ds.images)


def test_gzip_output_is_reproducible(tmp_path):
    write_idx(tmp_path / "a.gz", np.zeros(3, np.uint8))
    write_idx(tmp_path / "b.gz", np.zeros(3, np.uint8))
    assert (tmp_path / "a.gz").read_bytes() == (tmp_path / "b.gz").read_bytes()
    with pytest.raises(ValueError):
        write_idx(tmp_path / "c", np.zeros(3))


def test_zero_count_files(tmp_path):
    write_idx(tmp_path / "i", np.zeros((0, 28, 28), np.uint8))
    write_idx(tmp_path / "l", np.zeros(0, np.uint8))
    assert len(load_idx(tmp_path / "i", tmp_path / "l")) == 0


def test_idx_errors_name_offsets(tmp_path):
    _, _, ip, lp = write_pair(tmp_path, gz=False)
    raw = ip.read_bytes()
    ip.write_bytes(b"\x00\x00\x08\x01" + raw[4:])
    with pytest.raises(DataFormatError, match="bad magic .* at offset 0"):
        load_idx(ip, lp)
    ip.write_bytes(raw[:-10])
    with pytest.raises(DataFormatError, match=f"truncated at offset {len(raw) - 10}"):
        load_idx(ip, lp)
    ip.write_bytes(raw[:6])
    with pytest.raises(DataFormatError, match="truncated"):
        load_idx(ip, lp)
    ip.write_bytes(gzip.compress(raw))
    lp.write_bytes(b"")
    with pytest.raises(DataFormatError, match="truncated header"):
        load_idx(ip, lp)


def test_image_label_count_mismatch(tmp_path):
    write_idx(tmp_path / "i", np.zeros((3, 2, 2), np.uint8))
    write_idx(tmp_path / "l", np.zeros(2, np.uint8))
    with pytest.raises(DataFormatError):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_missing_mnist_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mnist_dir(tmp_path)


def cifar_records(n, seed=0):
    rng = np.random.default_rng(seed)
    recs = rng.integers(0, 256, (n, 3073), dtype=np.uint8)
    recs[:, 0] %= 10
    return recs


def test_cifar_parsing(tmp_path):
    recs = cifar_records(4)
    p = tmp_path / "data_batch_1.bin"
    p.write_bytes(recs.tobytes())
    ds = load_cifar10_bin(p)
    assert ds.images.shape == (4, 3, 32, 32)
    np.testing.assert_array_equal(ds.labels, recs[:, 0])
    # channel-planar: the first 1024 pixel bytes are the red plane
    np.testing.assert_allclose(ds.images[1, 0].ravel() * 255, recs[1, 1:1025])
    assert len(load_cifar10_bin([p, p], limit=6)) == 6
    p.write_bytes(recs.tobytes()[:-5])
    with pytest.raises(DataFormatError, match=f"byte offset {3 * 3073}"):
        load_cifar10_bin(p)


def test_manifest(tmp_path):
    _, _, ip, lp = write_pair(tmp_path, n=7, prefix="test")
    m = tmp_path / "MANIFEST"
    write_manifest(m, {"test_images": ip, "test_labels": lp})
    assert read_manifest(m) == {"test_images": ip, "test_labels": lp}
    assert len(load_dataset(m, "test")) == 7
    assert len(load_dataset(m, "test", limit=3)) == 3
    with pytest.raises(DataFormatError, match="no entries"):
        load_dataset(m, "train")
    ip.write_bytes(ip.read_bytes() + b"x")
    with pytest.raises(DataFormatError, match="checksum"):
        read_manifest(m)


def test_cifar_manifest(tmp_path):
    p = tmp_path / "b1.bin"
    p.write_bytes(cifar_records(5).tobytes())
    m = tmp_path / "MANIFEST"
    write_manifest(m, {"train_cifar1": p})
    assert load_dataset(m, limit=2).images.shape == (2, 3, 32, 32)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 2, 2)), np.zeros(3, np.int64))
    with pytest.raises(ValueError):
        Dataset(np.full((1, 1, 2, 2), 2.0), np.zeros(1, np.int64))


def test_synth_dataset():
    a, b = synth_dataset(3, 40, 4), synth_dataset(3, 40, 4)
    np.testing.assert_array_equal(a.images, b.images)
    assert np.bincount(a.labels).tolist() == [10] * 4
    assert a.images.min() >= 0 and a.images.max() <= 1
    with pytest.raises(ValueError):
        synth_dataset(0, 4, 9)


def test_augment_hooks():
    img = np.arange(16.0).reshape(1, 4, 4) / 16
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(augment(img, rng, force_flip=True), img[..., ::-1])
    np.testing.assert_array_equal(augment(img, rng, crop_pad=1, force_offset=(1, 1)), img)
    shifted = augment(img, rng, crop_pad=1, force_offset=(0, 0))
    np.testing.assert_array_equal(shifted[0, 1:, 1:], img[0, :3, :3])
    np.testing.assert_array_equal(shifted[0, 0, 1:], img[0, 1, :3])  # reflect padding
    with pytest.raises(ValueError):
        augment(img, rng, crop_pad=-1)


def test_augment_batch_is_keyed_by_index():
    imgs = np.random.default_rng(0).random((6, 1, 5, 5))
    a = augment_batch(imgs, np.arange(6), (1, 2), flip=True, crop_pad=2)
    b = augment_batch(imgs[3:], np.arange(3, 6), (1, 2), flip=True, crop_pad=2)
    np.testing.assert_array_equal(a[3:], b)


def test_cifar_directory(tmp_path):
    (tmp_path / "data_batch_1.bin").write_bytes(cifar_records(3, 0).tobytes())
    (tmp_path / "data_batch_2.bin").write_bytes(cifar_records(2, 1).tobytes())
    (tmp_path / "test_batch.bin").write_bytes(cifar_records(4, 2).tobytes())
    assert len(load_dataset(tmp_path)) == 5
    assert len(load_dataset(tmp_path, limit=4)) == 4
    assert len(load_dataset(tmp_path, "test")) == 4
