"""CIFAR binary ingestion, preprocessing, augmentation and a synthetic dataset."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR10_RECORD = 3073
CIFAR100_RECORD = 3074
PIXELS = 3 * 32 * 32

CIFAR_FILES = {
    "cifar10": {"train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"]},
    "cifar100": {"train": ["train.bin"], "test": ["test.bin"]},
}
NUM_CLASSES = {"cifar10": 10, "cifar100": 100}


class DataError(Exception):
    """Malformed, missing or corrupted dataset input."""


class ChecksumError(DataError):
    pass


@dataclass
class LabeledBatch:
    images: np.ndarray  # [N, 3, H, W]
    labels: np.ndarray  # [N] int64

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"images {self.images.shape} do not match {self.labels.shape[0]} labels")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "LabeledBatch":
        return LabeledBatch(self.images[idx], self.labels[idx])


@dataclass(frozen=True)
class DatasetMeta:
    name: str
    num_classes: int
    train_count: int
    test_count: int
    channel_means: tuple[float, float, float]
    channel_stds: tuple[float, float, float]


# ---------------------------------------------------------------------------
# binary format


def _parse_records(data: bytes, record: int, n_label: int, max_label: int):
    if len(data) == 0:
        raise DataError("no records")
    if len(data) % record:
        raise DataError(f"trailing bytes: length {len(data)} is not a multiple of the {record}-byte record size")
    rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, record)
    labels = rec[:, :n_label].astype(np.int64)
    bad = np.flatnonzero(labels[:, -1] > max_label)
    if bad.size:
        raise DataError(f"record {bad[0]}: label byte {labels[bad[0], -1]} exceeds {max_label}")
    images = rec[:, n_label:].reshape(-1, 3, 32, 32).copy()
    return images, labels


def parse_cifar10(data: bytes):
    """Decode 3073-byte records: one label byte, then the R, G and B 32x32 planes."""
    images, labels = _parse_records(data, CIFAR10_RECORD, 1, 9)
    return images, labels[:, 0]


def parse_cifar100(data: bytes, return_coarse: bool = False):
    """Decode 3074-byte records (coarse label, fine label, pixels); returns the fine labels."""
    images, labels = _parse_records(data, CIFAR100_RECORD, 2, 99)
    bad = np.flatnonzero(labels[:, 0] > 19)
    if bad.size:
        raise DataError(f"record {bad[0]}: coarse label byte {labels[bad[0], 0]} exceeds 19")
    if return_coarse:
        return images, labels[:, 1], labels[:, 0]
    return images, labels[:, 1]


def _check_u8_images(images):
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.shape[1:] != (3, 32, 32):
        raise ValueError(f"expected uint8 [N, 3, 32, 32] images, got {images.dtype} {images.shape}")
    return images.reshape(len(images), PIXELS)


def encode_cifar10(images, labels) -> bytes:
    pix = _check_u8_images(images)
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 9:
        raise ValueError("CIFAR-10 labels must lie in [0, 9]")
    return np.concatenate([labels.astype(np.uint8)[:, None], pix], axis=1).tobytes()


def encode_cifar100(images, fine_labels, coarse_labels=None) -> bytes:
    pix = _check_u8_images(images)
    fine = np.asarray(fine_labels)
    coarse = np.zeros_like(fine) if coarse_labels is None else np.asarray(coarse_labels)
    if fine.min(initial=0) < 0 or fine.max(initial=0) > 99:
        raise ValueError("CIFAR-100 fine labels must lie in [0, 99]")
    if coarse.min(initial=0) < 0 or coarse.max(initial=0) > 19:
        raise ValueError("CIFAR-100 coarse labels must lie in [0, 19]")
    head = np.stack([coarse, fine], axis=1).astype(np.uint8)
    return np.concatenate([head, pix], axis=1).tobytes()


# ---------------------------------------------------------------------------
# files and checksums


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_checksums(path) -> dict[str, str]:
    """Read a ``<file name> <hex digest>`` manifest; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected '<name> <hex digest>'")
        out[parts[0]] = parts[1].lower()
    return out


def write_checksums(path, digests: dict[str, str]):
    Path(path).write_text("".join(f"{name} {digest}\n" for name, digest in sorted(digests.items())))


def dataset_files(name: str, data_dir) -> dict[str, list[Path]]:
    if name not in CIFAR_FILES:
        raise DataError(f"unknown dataset {name!r}")
    return {split: [Path(data_dir) / f for f in files] for split, files in CIFAR_FILES[name].items()}


def verify_files(paths, checksums: dict[str, str] | None) -> dict[str, str]:
    """Hash every file; compare against ``checksums`` when given. Returns name -> digest."""
    digests = {}
    for p in paths:
        if not p.is_file():
            raise DataError(f"missing dataset file {p}")
        digests[p.name] = sha256_file(p)
        if checksums is not None:
            want = checksums.get(p.name)
            if want is None:
                raise ChecksumError(f"no checksum listed for {p.name}")
            if want != digests[p.name]:
                raise ChecksumError(f"checksum mismatch for {p.name}: expected {want}, got {digests[p.name]}")
    return digests


def load_cifar(name: str, data_dir, split: str, checksums: dict[str, str] | None = None, limit: int | None = None):
    """Load raw uint8 images and labels of one split, verifying checksums first."""
    paths = dataset_files(name, data_dir)[split]
    verify_files(paths, checksums)
    parse = parse_cifar10 if name == "cifar10" else parse_cifar100
    images, labels = [], []
    for p in paths:
        try:
            im, lb = parse(p.read_bytes())
        except DataError as exc:
            raise DataError(f"{p}: {exc}") from None
        images.append(im)
        labels.append(lb)
    images, labels = np.concatenate(images), np.concatenate(labels)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return images, labels


# ---------------------------------------------------------------------------
# preprocessing


def compute_meta(name: str, train_images, num_classes: int, test_count: int) -> DatasetMeta:
    """Channel statistics of the training split, on the [0, 1] scale."""
    x = np.asarray(train_images, dtype=np.float64) / 255.0
    means = x.mean(axis=(0, 2, 3))
    stds = x.std(axis=(0, 2, 3))
    return DatasetMeta(name, num_classes, len(x), test_count, tuple(map(float, means)), tuple(map(float, stds)))


def _meta_arrays(meta: DatasetMeta):
    mean = np.asarray(meta.channel_means, dtype=np.float64).reshape(1, 3, 1, 1)
    std = np.asarray(meta.channel_stds, dtype=np.float64).reshape(1, 3, 1, 1)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
        raise ValueError("dataset statistics must be finite")
    if np.any(std <= 0):
        raise ValueError("channel std must be positive")
    return mean, std


def normalize(batch: LabeledBatch, meta: DatasetMeta) -> LabeledBatch:
    """Per-channel (x / 255 - mean) / std."""
    mean, std = _meta_arrays(meta)
    x = np.asarray(batch.images, dtype=np.float64)
    return LabeledBatch((x / 255.0 - mean) / std, batch.labels)


def denormalize(batch: LabeledBatch, meta: DatasetMeta) -> LabeledBatch:
    mean, std = _meta_arrays(meta)
    return LabeledBatch((batch.images * std + mean) * 255.0, batch.labels)


PAD = 4


def crop_flip(images: np.ndarray, offsets: np.ndarray, flips: np.ndarray) -> np.ndarray:
    """Reflect-pad by 4, crop at per-image (dy, dx) offsets and mirror where ``flips`` is set."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)), mode="reflect")
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def augment(batch: LabeledBatch, seed) -> LabeledBatch:
    """Random pad-and-crop plus horizontal flip (p=0.5); deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    n = len(batch)
    offsets = rng.integers(0, 2 * PAD + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    return LabeledBatch(crop_flip(batch.images, offsets, flips), batch.labels)


# ---------------------------------------------------------------------------
# synthetic data


def synthetic_dataset(
    num_classes: int = 10,
    n: int = 1000,
    seed: int = 0,
    image_size: int = 32,
    n_test: int | None = None,
    noise: float = 0.5,
):
    """Class-conditional Gaussian-blob images; returns (train, test) LabeledBatches.

    Each class owns a blob with its own centre, width and colour. Samples are the
    class template plus i.i.d. Gaussian pixel noise of std ``noise``.
    """
    if n < num_classes:
        raise ValueError(f"need at least one sample per class (n={n}, classes={num_classes})")
    n_test = n // 4 if n_test is None else n_test
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size] / (image_size - 1)
    centres = rng.uniform(0.2, 0.8, size=(num_classes, 2))
    widths = rng.uniform(0.1, 0.25, size=num_classes)
    colours = rng.normal(0.0, 1.0, size=(num_classes, 3))
    colours /= np.linalg.norm(colours, axis=1, keepdims=True)
    blobs = np.exp(-((yy - centres[:, 0, None, None]) ** 2 + (xx - centres[:, 1, None, None]) ** 2) / (2 * widths[:, None, None] ** 2))
    templates = 2.0 * colours[:, :, None, None] * blobs[:, None]

    def draw(count):
        labels = rng.permutation(np.arange(count) % num_classes)
        images = templates[labels] + noise * rng.normal(size=(count, 3, image_size, image_size))
        return LabeledBatch(images, labels)

    return draw(n), draw(n_test)
