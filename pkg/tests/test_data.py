import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given
from hypothesis import strategies as st

from atac.data import (
    ChecksumError,
    DataError,
    DatasetMeta,
    LabeledBatch,
    augment,
    compute_meta,
    crop_flip,
    denormalize,
    encode_cifar10,
    encode_cifar100,
    load_cifar,
    normalize,
    parse_cifar10,
    parse_cifar100,
    read_checksums,
    sha256_file,
    synthetic_dataset,
    verify_files,
    write_checksums,
)


def random_u8(rng, n):
    return rng.integers(0, 256, size=(n, 3, 32, 32), dtype=np.uint8)


def meta(means, stds):
    return DatasetMeta("t", 10, 1, 1, tuple(means), tuple(stds))


def test_zero_record():
    images, labels = parse_cifar10(bytes(3073))
    assert images.shape == (1, 3, 32, 32) and not images.any()
    npt.assert_array_equal(labels, [0])
    images, labels = parse_cifar100(bytes(3074))
    npt.assert_array_equal(labels, [0])


def test_record_layout_is_label_then_rgb_planes():
    rec = bytearray(3073)
    rec[0] = 7
    rec[1] = 11  # R at (0, 0)
    rec[1 + 1024 + 33] = 22  # G at (1, 1)
    rec[1 + 2048 + 1023] = 33  # B at (31, 31)
    images, labels = parse_cifar10(bytes(rec))
    assert labels[0] == 7
    assert images[0, 0, 0, 0] == 11 and images[0, 1, 1, 1] == 22 and images[0, 2, 31, 31] == 33


def test_full_batch_size(rng):
    data = encode_cifar10(random_u8(rng, 10000), rng.integers(0, 10, 10000))
    assert len(data) == 10000 * 3073
    assert parse_cifar10(data)[0].shape[0] == 10000


@pytest.mark.parametrize(
    "data, match",
    [(b"", "no records"), (bytes(3074), "trailing bytes"), (bytes([10]) + bytes(3072), "label byte 10")],
)
def test_cifar10_rejects(data, match):
    with pytest.raises(DataError, match=match):
        parse_cifar10(data)


def test_cifar100_rejects():
    with pytest.raises(DataError, match="label byte 100"):
        parse_cifar100(bytes([0, 100]) + bytes(3072))
    with pytest.raises(DataError, match="coarse"):
        parse_cifar100(bytes([20, 5]) + bytes(3072))
    with pytest.raises(DataError, match="trailing"):
        parse_cifar100(bytes(3073))


@given(n=st.integers(1, 5), seed=st.integers(0, 1000))
def test_roundtrip_bitwise(n, seed):
    rng = np.random.default_rng(seed)
    data = encode_cifar10(random_u8(rng, n), rng.integers(0, 10, n))
    assert encode_cifar10(*parse_cifar10(data)) == data
    data = encode_cifar100(random_u8(rng, n), rng.integers(0, 100, n), rng.integers(0, 20, n))
    assert encode_cifar100(*parse_cifar100(data, return_coarse=True)) == data


def test_normalize_examples():
    batch = LabeledBatch(np.full((1, 3, 2, 2), 255.0), np.zeros(1))
    npt.assert_array_equal(normalize(batch, meta([0.5] * 3, [0.25] * 3)).images, 2.0)
    batch = LabeledBatch(np.full((1, 3, 2, 2), 255 * 0.2), np.zeros(1))
    npt.assert_allclose(normalize(batch, meta([0.2] * 3, [0.3] * 3)).images, 0.0, atol=1e-15)
    x = np.arange(12.0).reshape(1, 3, 2, 2)
    npt.assert_array_equal(normalize(LabeledBatch(x, [0]), meta([0] * 3, [1] * 3)).images, x / 255)


def test_normalize_rejects_bad_stats():
    with pytest.raises(ValueError):
        normalize(LabeledBatch(np.zeros((1, 3, 2, 2)), [0]), meta([0] * 3, [0, 1, 1]))


def test_normalize_inverse(rng):
    raw = random_u8(rng, 20)
    m = compute_meta("t", raw, 10, 0)
    batch = LabeledBatch(raw.astype(np.float64), np.zeros(20))
    back = denormalize(normalize(batch, m), m)
    assert np.max(np.abs(back.images - raw)) < 1e-12


def test_meta_from_train_split(rng):
    raw = random_u8(rng, 50)
    m = compute_meta("t", raw, 10, 7)
    npt.assert_allclose(m.channel_means, (raw / 255.0).mean(axis=(0, 2, 3)))
    assert m.train_count == 50 and m.test_count == 7


def test_crop_flip_identity_and_involution(rng):
    x = rng.normal(size=(3, 3, 8, 8))
    centre = np.full((3, 2), 4)
    npt.assert_array_equal(crop_flip(x, centre, np.zeros(3, bool)), x)
    once = crop_flip(x, centre, np.ones(3, bool))
    npt.assert_array_equal(once, x[..., ::-1])
    npt.assert_array_equal(crop_flip(once, centre, np.ones(3, bool)), x)


def test_augment_deterministic_and_label_preserving(rng):
    batch = LabeledBatch(rng.normal(size=(6, 3, 8, 8)), np.arange(6))
    a, b = augment(batch, [1, 2]), augment(batch, [1, 2])
    npt.assert_array_equal(a.images, b.images)
    npt.assert_array_equal(a.labels, batch.labels)
    assert a.images.shape == batch.images.shape
    assert not np.array_equal(augment(batch, [1, 3]).images, a.images)


def test_synthetic_dataset_contract():
    a_tr, a_te = synthetic_dataset(10, 103, seed=4, image_size=8)
    b_tr, _ = synthetic_dataset(10, 103, seed=4, image_size=8)
    npt.assert_array_equal(a_tr.images, b_tr.images)
    counts = np.bincount(a_tr.labels, minlength=10)
    assert counts.max() - counts.min() <= 1
    assert a_tr.images.shape == (103, 3, 8, 8) and len(a_te) == 25


def cifar_dir(tmp_path, rng, n=4):
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        (tmp_path / name).write_bytes(encode_cifar10(random_u8(rng, n), rng.integers(0, 10, n)))
    return tmp_path


def test_checksum_file_roundtrip(tmp_path, rng):
    d = cifar_dir(tmp_path, rng)
    paths = sorted(d.glob("*.bin"))
    digests = verify_files(paths, None)
    write_checksums(d / "SHA256SUMS", digests)
    assert read_checksums(d / "SHA256SUMS") == digests
    assert digests["test_batch.bin"] == sha256_file(d / "test_batch.bin")
    images, labels = load_cifar("cifar10", d, "train", read_checksums(d / "SHA256SUMS"))
    assert images.shape == (20, 3, 32, 32)
    images, _ = load_cifar("cifar10", d, "test", limit=2)
    assert len(images) == 2


def test_checksum_mismatch_and_missing(tmp_path, rng):
    d = cifar_dir(tmp_path, rng)
    digests = verify_files(sorted(d.glob("*.bin")), None)
    digests["test_batch.bin"] = "0" * 64
    with pytest.raises(ChecksumError, match="test_batch.bin"):
        load_cifar("cifar10", d, "test", digests)
    (d / "data_batch_3.bin").unlink()
    with pytest.raises(DataError, match="missing"):
        load_cifar("cifar10", d, "train")


def test_malformed_file_names_path(tmp_path, rng):
    d = cifar_dir(tmp_path, rng)
    (d / "test_batch.bin").write_bytes(bytes(3073 * 2 + 5))
    with pytest.raises(DataError, match="test_batch.bin: trailing"):
        load_cifar("cifar10", d, "test")
