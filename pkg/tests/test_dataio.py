import gzip
import struct

import numpy as np
import pytest

from dddm.dataio import (IMAGE_MAGIC, LABEL_MAGIC, Dataset, SplitSpec, largest_remainder,
                         load_dataset, load_idx, load_mnist, read_idx, save_dataset, save_idx,
                         split, synthetic_blobs, write_idx)
from dddm.exceptions import (BadMagicError, CountMismatchError, ParameterError,
                             TruncatedFileError)


def idx_bytes(magic, dims, data):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(data)


@pytest.fixture
def fixture_pair(tmp_path):
    # two 2x3 images and their labels, written byte by byte
    pixels = [0, 255, 51, 102, 153, 204, 255, 0, 0, 0, 0, 255]
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    img.write_bytes(idx_bytes(IMAGE_MAGIC, (2, 2, 3), pixels))
    lab.write_bytes(idx_bytes(LABEL_MAGIC, (2,), [7, 1]))
    return img, lab


def test_hand_built_idx_fixture(fixture_pair):
    data = load_idx(*fixture_pair)
    assert data.features.shape == (2, 6)
    np.testing.assert_allclose(data.features[0], [0, 1, 0.2, 0.4, 0.6, 0.8])
    assert data.labels.tolist() == [7, 1]
    assert data.meta["image_shape"] == [2, 3]


def test_gzip_is_transparent(tmp_path, fixture_pair):
    img, lab = fixture_pair
    gz = tmp_path / "img.idx.gz"
    gz.write_bytes(gzip.compress(img.read_bytes()))
    np.testing.assert_array_equal(read_idx(gz, IMAGE_MAGIC), read_idx(img, IMAGE_MAGIC))


def test_bad_magic(tmp_path, fixture_pair):
    img, _ = fixture_pair
    with pytest.raises(BadMagicError):
        read_idx(img, LABEL_MAGIC)
    bad = tmp_path / "bad.idx"
    bad.write_bytes(idx_bytes(0x0D01, (1,), [0, 0, 0, 0]))
    with pytest.raises(BadMagicError):
        read_idx(bad)


def test_truncated_header_and_data(tmp_path):
    p = tmp_path / "t.idx"
    p.write_bytes(b"\x00\x00")
    with pytest.raises(TruncatedFileError):
        read_idx(p)
    p.write_bytes(idx_bytes(LABEL_MAGIC, (5,), [1, 2, 3]))
    with pytest.raises(TruncatedFileError):
        read_idx(p)


def test_trailing_bytes(tmp_path):
    p = tmp_path / "t.idx"
    p.write_bytes(idx_bytes(LABEL_MAGIC, (2,), [1, 2, 3]))
    with pytest.raises(CountMismatchError):
        read_idx(p)


def test_image_label_count_mismatch(tmp_path, fixture_pair):
    img, _ = fixture_pair
    lab = tmp_path / "lab3.idx"
    lab.write_bytes(idx_bytes(LABEL_MAGIC, (3,), [1, 2, 3]))
    with pytest.raises(CountMismatchError):
        load_idx(img, lab)


def test_idx_roundtrip(tmp_path, fixture_pair):
    data = load_idx(*fixture_pair)
    save_idx(data, tmp_path / "i.gz", tmp_path / "l.gz")
    again = load_idx(tmp_path / "i.gz", tmp_path / "l.gz")
    np.testing.assert_array_equal(again.features, data.features)
    np.testing.assert_array_equal(again.labels, data.labels)


def test_write_idx_is_byte_stable(tmp_path):
    a = np.arange(12, dtype=np.uint8).reshape(3, 4)
    write_idx(tmp_path / "a.gz", a)
    first = (tmp_path / "a.gz").read_bytes()
    write_idx(tmp_path / "a.gz", a)
    assert (tmp_path / "a.gz").read_bytes() == first


def test_dataset_validation():
    with pytest.raises(ParameterError):
        Dataset(np.full((2, 3), 1.5), [0, 1])
    with pytest.raises(ParameterError):
        Dataset(np.zeros((2, 3)), [0])


def test_container_roundtrip(tmp_path):
    data = synthetic_blobs(3, 4, 5, 0.1, seed=0)
    save_dataset(tmp_path / "d.npz", data, {"note": "x"})
    again = load_dataset(tmp_path / "d.npz")
    np.testing.assert_array_equal(again.features, data.features)
    np.testing.assert_array_equal(again.labels, data.labels)
    assert again.meta["note"] == "x" and again.meta["version"] == 1


def test_largest_remainder():
    assert largest_remainder(10, (0.8, 0.1, 0.1)).tolist() == [8, 1, 1]
    assert largest_remainder(7, (0.5, 0.25, 0.25)).tolist() == [3, 2, 2]
    assert largest_remainder(101, (1 / 3, 1 / 3, 1 / 3)).sum() == 101


def test_split_partitions_and_is_seeded():
    data = synthetic_blobs(4, 3, 25, 0.1, seed=1)
    tr, va, te = split(data, SplitSpec(seed=3))
    assert (len(tr), len(va), len(te)) == (80, 10, 10)
    all_rows = np.concatenate([tr.features, va.features, te.features])
    assert sorted(map(tuple, all_rows)) == sorted(map(tuple, data.features))
    tr2, _, _ = split(data, SplitSpec(seed=3))
    np.testing.assert_array_equal(tr.features, tr2.features)
    assert tr.meta["split"] == "train"


def test_split_keeps_every_class_in_train():
    # one lone example of class 2 must end up in train for every seed
    X = np.random.default_rng(0).uniform(0, 1, (21, 2))
    y = np.array([0] * 10 + [1] * 10 + [2])
    data = Dataset(X, y)
    for seed in range(20):
        tr, _, _ = split(data, SplitSpec(0.6, 0.2, 0.2, seed))
        assert set(tr.labels.tolist()) == {0, 1, 2}


def test_split_rejects_bad_fractions():
    with pytest.raises(ParameterError):
        SplitSpec(0.5, 0.5, 0.5)


def test_blobs_shape_and_range():
    data = synthetic_blobs(3, 5, 10, 0.3, seed=2)
    assert data.features.shape == (30, 5) and data.n_classes == 3
    assert data.features.min() >= 0 and data.features.max() <= 1
    np.testing.assert_array_equal(synthetic_blobs(3, 5, 10, 0.3, 2).features, data.features)


def test_blobs_zero_spread_sits_on_centers():
    data = synthetic_blobs(2, 3, 4, 0.0, seed=5)
    centers = np.array(data.meta["centers"])
    np.testing.assert_array_equal(data.features, centers[data.labels])


def test_bundled_mnist_digits():
    data = load_mnist()
    assert data.features.shape == (10000, 784)
    assert set(data.labels.tolist()) == set(range(10))
    # pixels are exact multiples of 1/255
    np.testing.assert_allclose(data.features * 255, np.rint(data.features * 255), atol=1e-9)


def test_missing_mnist_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path)
