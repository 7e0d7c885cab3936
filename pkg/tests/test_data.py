"""Loaders, normalization, target sampling, batching."""

import struct

import numpy as np
import pytest

from filtertailor import data as D
from filtertailor.errors import ConfigError, DataFormatError
from filtertailor.tensor import Tensor

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


def _idx_pair(tmp_path, pixels, labels, image_magic=IMAGE_MAGIC, label_magic=LABEL_MAGIC):
    n, h, w = pixels.shape
    ipath = tmp_path / "images.idx"
    lpath = tmp_path / "labels.idx"
    ipath.write_bytes(struct.pack(">IIII", image_magic, n, h, w) + pixels.tobytes())
    lpath.write_bytes(struct.pack(">II", label_magic, len(labels))
                      + np.asarray(labels, dtype=np.uint8).tobytes())
    return ipath, lpath


def _tagged_dataset(n, class_count, name="tagged"):
    """Images whose [0,0,0] pixel is the example's own index, for identity tracking."""
    images = np.zeros((n, 1, 2, 2), dtype=np.float32)
    images[:, 0, 0, 0] = np.arange(n)
    labels = np.arange(n) % class_count
    return D.Dataset(Tensor(images), labels.astype(np.int64), class_count, name)


# ---------------------------------------------------------------------------
# IDX


def test_load_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
    ipath, lpath = _idx_pair(tmp_path, pixels, [0, 1, 2, 1, 0])
    ds = D.load_idx(ipath, lpath)
    assert ds.images.data.shape == (5, 1, 4, 3)
    assert ds.images.data.dtype == np.float32
    assert np.array_equal(ds.images.data, pixels[:, None].astype(np.float32) / 255.0)
    assert ds.labels.dtype == np.int64
    assert list(ds.labels) == [0, 1, 2, 1, 0]
    assert ds.class_count == 3
    assert ds.n == 5


def test_load_idx_rejects_bad_magic(tmp_path):
    pixels = np.zeros((2, 3, 3), dtype=np.uint8)
    ipath, lpath = _idx_pair(tmp_path, pixels, [0, 1], image_magic=0x00000802)
    with pytest.raises(DataFormatError, match="magic"):
        D.load_idx(ipath, lpath)
    ipath, lpath = _idx_pair(tmp_path, pixels, [0, 1], label_magic=0x00000803)
    with pytest.raises(DataFormatError, match="magic"):
        D.load_idx(ipath, lpath)


def test_load_idx_byte_count_error_names_both_sizes(tmp_path):
    ipath = tmp_path / "images.idx"
    ipath.write_bytes(struct.pack(">IIII", IMAGE_MAGIC, 10000, 28, 28) + b"\x00" * 100)
    lpath = tmp_path / "labels.idx"
    lpath.write_bytes(struct.pack(">II", LABEL_MAGIC, 10000) + b"\x00" * 10000)
    with pytest.raises(DataFormatError) as err:
        D.load_idx(ipath, lpath)
    assert "7840016" in str(err.value)
    assert "116" in str(err.value)


def test_load_idx_rejects_count_mismatch_and_short_labels(tmp_path):
    pixels = np.zeros((3, 2, 2), dtype=np.uint8)
    ipath, lpath = _idx_pair(tmp_path, pixels, [0, 1])
    with pytest.raises(DataFormatError, match="mismatch"):
        D.load_idx(ipath, lpath)

    lpath.write_bytes(struct.pack(">II", LABEL_MAGIC, 3) + b"\x00\x01")
    with pytest.raises(DataFormatError, match="expected 11 bytes"):
        D.load_idx(ipath, lpath)


def test_load_idx_missing_file(tmp_path):
    with pytest.raises(DataFormatError, match="not found"):
        D.load_idx(tmp_path / "nope.idx", tmp_path / "labels.idx")


# ---------------------------------------------------------------------------
# CIFAR binary


def _cifar_file(tmp_path, labels, name="batch.bin"):
    records = []
    for i, label in enumerate(labels):
        body = (np.arange(3072, dtype=np.int64) % 251 + i).astype(np.uint8)
        records.append(bytes([label]) + body.tobytes())
    path = tmp_path / name
    path.write_bytes(b"".join(records))
    return path


def test_load_cifar_layout(tmp_path):
    path = _cifar_file(tmp_path, [7, 2])
    ds = D.load_cifar_binary(path)
    assert ds.images.data.shape == (2, 3, 32, 32)
    assert ds.class_count == 10
    assert list(ds.labels) == [7, 2]
    # record layout is label byte then R,G,B planes in row-major order
    for c, y, x in [(0, 0, 0), (1, 5, 9), (2, 31, 31)]:
        expect = ((c * 1024 + y * 32 + x) % 251) / 255.0
        assert abs(ds.images.data[0, c, y, x] - expect) < 1e-7


def test_load_cifar_concatenates_files(tmp_path):
    a = _cifar_file(tmp_path, [1], name="a.bin")
    b = _cifar_file(tmp_path, [4, 9], name="b.bin")
    ds = D.load_cifar_binary([a, b])
    assert ds.n == 3
    assert list(ds.labels) == [1, 4, 9]


def test_load_cifar_rejects_partial_record(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * 3072)
    with pytest.raises(DataFormatError, match="3073"):
        D.load_cifar_binary(path)


def test_load_cifar_rejects_out_of_range_label(tmp_path):
    path = _cifar_file(tmp_path, [10])
    with pytest.raises(DataFormatError, match="label"):
        D.load_cifar_binary(path)


# ---------------------------------------------------------------------------
# dataset container


def test_dataset_validation():
    good = np.zeros((2, 1, 2, 2), dtype=np.float32)
    labels = np.asarray([0, 1], dtype=np.int64)
    with pytest.raises(DataFormatError, match="N,C,H,W"):
        D.Dataset(Tensor(np.zeros((2, 2, 2), dtype=np.float32)), labels, 2, "x")
    with pytest.raises(DataFormatError, match="empty"):
        D.Dataset(Tensor(np.zeros((0, 1, 2, 2), dtype=np.float32)),
                  np.zeros(0, dtype=np.int64), 2, "x")
    with pytest.raises(DataFormatError, match="labels"):
        D.Dataset(Tensor(good), np.asarray([0], dtype=np.int64), 2, "x")
    with pytest.raises(DataFormatError, match="outside"):
        D.Dataset(Tensor(good), np.asarray([0, 2], dtype=np.int64), 2, "x")


def test_target_task_spec_validation():
    with pytest.raises(ConfigError):
        D.TargetTaskSpec(k=0, val_fraction=0.1, seed=0)
    with pytest.raises(ConfigError):
        D.TargetTaskSpec(k=5, val_fraction=1.0, seed=0)


# ---------------------------------------------------------------------------
# normalization


def test_normalize_zero_centers_each_channel():
    rng = np.random.default_rng(1)
    images = rng.uniform(0, 1, (40, 3, 4, 4)).astype(np.float32)
    ds = D.Dataset(Tensor(images), np.zeros(40, dtype=np.int64), 2, "x")
    shifted, means = D.normalize(ds)
    assert means.shape == (3,)
    assert np.abs(shifted.images.data.mean(axis=(0, 2, 3))).max() < 1e-4
    assert np.abs(means - images.mean(axis=(0, 2, 3))).max() < 1e-5


def test_shift_channels_applies_training_means():
    rng = np.random.default_rng(2)
    train = D.Dataset(Tensor(rng.uniform(0, 1, (20, 2, 3, 3)).astype(np.float32)),
                      np.zeros(20, dtype=np.int64), 2, "train")
    val_images = rng.uniform(0, 1, (6, 2, 3, 3)).astype(np.float32)
    val = D.Dataset(Tensor(val_images), np.zeros(6, dtype=np.int64), 2, "val")
    _, means = D.normalize(train)
    shifted = D.shift_channels(val, means)
    assert np.allclose(shifted.images.data,
                       val_images - means[None, :, None, None], atol=1e-7)


# ---------------------------------------------------------------------------
# target sampling


def test_sample_target_k30_ten_classes():
    ds = _tagged_dataset(1000, 10)
    train, val = D.sample_target(ds, D.TargetTaskSpec(k=30, val_fraction=0.1, seed=0))
    assert train.n == 300
    # ceil(30 * 0.1 / 0.9) = 4 held out per class
    assert val.n == 40
    for c in range(10):
        assert (train.labels == c).sum() == 30
        assert (val.labels == c).sum() == 4


def test_sample_target_splits_are_disjoint():
    ds = _tagged_dataset(200, 5)
    train, val = D.sample_target(ds, D.TargetTaskSpec(k=8, val_fraction=0.2, seed=3))
    train_ids = set(train.images.data[:, 0, 0, 0].tolist())
    val_ids = set(val.images.data[:, 0, 0, 0].tolist())
    assert len(train_ids) == train.n and len(val_ids) == val.n
    assert not train_ids & val_ids
    # identities really belong to the claimed class
    for split in (train, val):
        assert np.array_equal(split.images.data[:, 0, 0, 0].astype(np.int64) % 5,
                              split.labels)


def test_sample_target_seed_determinism():
    ds = _tagged_dataset(150, 3)
    spec = D.TargetTaskSpec(k=10, val_fraction=0.1, seed=9)
    t1, v1 = D.sample_target(ds, spec)
    t2, v2 = D.sample_target(ds, spec)
    assert np.array_equal(t1.images.data, t2.images.data)
    assert np.array_equal(v1.labels, v2.labels)
    t3, _ = D.sample_target(ds, D.TargetTaskSpec(k=10, val_fraction=0.1, seed=10))
    assert not np.array_equal(t1.images.data, t3.images.data)


def test_sample_target_balanced_even_from_skewed_pool():
    # heavily imbalanced pool still yields k per class
    images = np.zeros((130, 1, 2, 2), dtype=np.float32)
    labels = np.concatenate([np.zeros(100), np.ones(20), np.full(10, 2)]).astype(np.int64)
    ds = D.Dataset(Tensor(images), labels, 3, "skewed")
    train, val = D.sample_target(ds, D.TargetTaskSpec(k=5, val_fraction=0.2, seed=2))
    assert [int((train.labels == c).sum()) for c in range(3)] == [5, 5, 5]
    assert [int((val.labels == c).sum()) for c in range(3)] == [2, 2, 2]


def test_sample_target_names_deficient_class():
    images = np.zeros((10, 1, 2, 2), dtype=np.float32)
    labels = np.asarray([0, 0, 0, 0, 0, 0, 0, 1, 1, 1], dtype=np.int64)
    ds = D.Dataset(Tensor(images), labels, 2, "skew")
    with pytest.raises(ConfigError, match="class 1"):
        D.sample_target(ds, D.TargetTaskSpec(k=3, val_fraction=0.25, seed=0))


def test_sample_target_rejects_oversized_request():
    ds = _tagged_dataset(20, 4)
    with pytest.raises(ConfigError, match="needs"):
        D.sample_target(ds, D.TargetTaskSpec(k=10, val_fraction=0.1, seed=0))


# ---------------------------------------------------------------------------
# plain split


def test_split_fraction_sizes_and_disjointness():
    ds = _tagged_dataset(50, 5)
    train, val = D.split_fraction(ds, 0.2, seed=1)
    assert val.n == 10 and train.n == 40
    ids = np.concatenate([train.images.data[:, 0, 0, 0], val.images.data[:, 0, 0, 0]])
    assert sorted(ids.tolist()) == list(range(50))


def test_split_fraction_determinism_and_guard():
    ds = _tagged_dataset(10, 2)
    a, _ = D.split_fraction(ds, 0.3, seed=4)
    b, _ = D.split_fraction(ds, 0.3, seed=4)
    assert np.array_equal(a.images.data, b.images.data)
    tiny = _tagged_dataset(2, 2)
    with pytest.raises(ConfigError, match="no training data"):
        D.split_fraction(tiny, 0.9, seed=0)
    with pytest.raises(ConfigError):
        D.split_fraction(ds, 1.5, seed=0)


# ---------------------------------------------------------------------------
# batching


def test_batch_iterator_ordered_pass():
    ds = _tagged_dataset(7, 7)
    batches = list(D.batch_iterator(ds, 3, shuffle=False))
    assert [b[0].data.shape[0] for b in batches] == [3, 3, 1]
    seen = np.concatenate([b[1] for b in batches])
    assert np.array_equal(seen, np.arange(7))
    assert all(isinstance(b[0], Tensor) for b in batches)


def test_batch_iterator_shuffle_covers_everything_once():
    ds = _tagged_dataset(10, 10)
    rng = np.random.default_rng(6)
    seen = np.concatenate([b[1] for b in D.batch_iterator(ds, 4, rng=rng)])
    assert sorted(seen.tolist()) == list(range(10))


def test_batch_iterator_contracts():
    ds = _tagged_dataset(4, 2)
    with pytest.raises(ConfigError, match="generator"):
        list(D.batch_iterator(ds, 2))
    with pytest.raises(ConfigError, match="batch_size"):
        list(D.batch_iterator(ds, 0, shuffle=False))


# ---------------------------------------------------------------------------
# augmentation


def test_random_crop_pad_zero_pad_is_identity():
    images = np.ones((2, 1, 4, 4), dtype=np.float32)
    assert D.random_crop_pad(images, 0, np.random.default_rng(0)) is images


def test_random_crop_pad_translates_content():
    images = np.zeros((200, 1, 5, 5), dtype=np.float32)
    images[:, 0, 2, 2] = 1.0
    out = D.random_crop_pad(images, 1, np.random.default_rng(7))
    assert out.shape == images.shape
    offsets = set()
    for i in range(200):
        ys, xs = np.nonzero(out[i, 0])
        assert len(ys) == 1
        assert abs(int(ys[0]) - 2) <= 1 and abs(int(xs[0]) - 2) <= 1
        offsets.add((int(ys[0]), int(xs[0])))
    # with 200 draws every one of the nine shifts should appear
    assert len(offsets) == 9
