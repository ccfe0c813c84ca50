"""Task data: IDX ingestion, permuted task sequences, synthetic fallback, batching.

A task sequence is built from one base dataset (MNIST-style images or a
synthetic stand-in) by applying a fixed, seeded pixel permutation per
task. Every array leaving this module is float64 with pixels in [0, 1].
"""

from __future__ import annotations

import gzip
import os
import struct
import urllib.request
from dataclasses import dataclass

import numpy as np

from .numerics import RandomStream, ShapeError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# Stream ids used when deriving children from an experiment seed.
PERMUTATION_STREAM_ID = 1
SYNTH_STREAM_ID = 2

MNIST_FILE_NAMES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class IdxFormatError(ValueError):
    """An IDX file violates the published layout."""


class IdxMagicError(IdxFormatError):
    """Unexpected magic number for the requested IDX payload type."""


class IdxTruncatedError(IdxFormatError):
    """IDX payload shorter than its header promises."""


class IdxCountMismatchError(IdxFormatError):
    """Image and label files disagree on the number of items."""


def _read_idx(path: str, expected_magic: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: missing IDX header")
    (magic,) = struct.unpack(">i", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(
            f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    ndims = magic & 0xFF
    header_len = 4 + 4 * ndims
    if len(raw) < header_len:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndims}i", raw[4:header_len])
    expected = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) < expected:
        raise IdxTruncatedError(
            f"{path}: payload has {len(payload)} bytes, header implies {expected}"
        )
    if len(payload) > expected:
        raise IdxFormatError(
            f"{path}: payload has {len(payload)} bytes, {len(payload) - expected} more "
            f"than the header implies"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path: str, labels_path: str) -> tuple[np.ndarray, np.ndarray]:
    """Load an IDX image/label pair.

    Returns ``(images, labels)`` with images flattened to rows and scaled
    by 1/255 into [0, 1], and labels as int64. Image and label counts must
    agree.
    """
    images = _read_idx(images_path, IMAGE_MAGIC)
    labels = _read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images.shape[0]} images vs {labels.shape[0]} labels"
        )
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return flat, labels.astype(np.int64)


def load_mnist(data_dir: str) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Load the four canonical MNIST IDX files from ``data_dir``."""
    train = load_idx(
        os.path.join(data_dir, MNIST_FILE_NAMES["train_images"]),
        os.path.join(data_dir, MNIST_FILE_NAMES["train_labels"]),
    )
    test = load_idx(
        os.path.join(data_dir, MNIST_FILE_NAMES["test_images"]),
        os.path.join(data_dir, MNIST_FILE_NAMES["test_labels"]),
    )
    return train, test


def fetch_idx_files(base_url: str, data_dir: str) -> list[str]:
    """Download the four IDX files from ``base_url`` into ``data_dir``.

    Tries ``<base_url>/<name>.gz`` first, then the raw name. Each payload
    is validated against its own header (magic, dimension counts, exact
    byte length) before being written, and image/label counts are
    cross-checked per split.
    """
    os.makedirs(data_dir, exist_ok=True)
    written = []
    blobs = {}
    for key, name in MNIST_FILE_NAMES.items():
        data = None
        errors = []
        for candidate, compressed in ((f"{name}.gz", True), (name, False)):
            url = base_url.rstrip("/") + "/" + candidate
            try:
                with urllib.request.urlopen(url) as resp:
                    data = resp.read()
                if compressed:
                    data = gzip.decompress(data)
                break
            except OSError as exc:  # urllib wraps HTTP and file errors in OSError
                errors.append(f"{url}: {exc}")
                data = None
        if data is None:
            raise IOError("could not fetch IDX file:\n  " + "\n  ".join(errors))
        path = os.path.join(data_dir, name)
        with open(path, "wb") as fh:
            fh.write(data)
        expected_magic = IMAGE_MAGIC if "images" in key else LABEL_MAGIC
        blobs[key] = _read_idx(path, expected_magic)
        written.append(path)
    for split in ("train", "test"):
        n_img = blobs[f"{split}_images"].shape[0]
        n_lab = blobs[f"{split}_labels"].shape[0]
        if n_img != n_lab:
            raise IdxCountMismatchError(f"{split}: {n_img} images vs {n_lab} labels")
    return written


@dataclass(frozen=True)
class TaskDataset:
    """One task of a sequence: permuted train/test splits plus its permutation."""

    task_id: int
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    permutation: np.ndarray

    def __post_init__(self):
        for name in ("train", "test"):
            images = getattr(self, f"{name}_images")
            labels = getattr(self, f"{name}_labels")
            if images.ndim != 2 or images.dtype != np.float64:
                raise ShapeError(f"{name}_images must be a 2-D float64 matrix")
            if labels.shape != (images.shape[0],):
                raise ShapeError(
                    f"{name}: {images.shape[0]} images vs {labels.shape[0]} labels"
                )
            if images.size and (images.min() < 0.0 or images.max() > 1.0):
                raise ValueError(f"{name}_images has pixels outside [0, 1]")
            if labels.size and (labels.min() < 0 or labels.max() > 9):
                raise ValueError(f"{name}_labels outside 0..9")
        width = self.train_images.shape[1]
        perm = np.asarray(self.permutation)
        if not np.array_equal(np.sort(perm), np.arange(width)):
            raise ValueError(f"permutation is not a bijection on 0..{width - 1}")

    @property
    def width(self) -> int:
        return self.train_images.shape[1]


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-cluster stand-in dataset, one cluster per class."""

    classes: int = 10
    dims: int = 784
    samples_per_class: int = 100
    cluster_spread: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.classes < 1 or self.dims < 1 or self.samples_per_class < 1:
            raise ValueError("classes, dims and samples_per_class must be >= 1")
        if not self.cluster_spread > 0:
            raise ValueError(f"cluster_spread must be > 0, got {self.cluster_spread}")
        if self.classes > 10:
            raise ValueError("labels are restricted to 0..9")


def synth_dataset(spec: SyntheticSpec) -> TaskDataset:
    """Build the synthetic fallback dataset described by ``spec``.

    Each class is an isotropic Gaussian around a center drawn uniformly in
    [0.2, 0.8] per dimension; samples are clipped to [0, 1] and split
    80/20 per class into train/test. Fully determined by ``spec.seed``.
    """
    rs = RandomStream(spec.seed, key=(SYNTH_STREAM_ID,))
    centers = rs.uniform(0.2, 0.8, (spec.classes, spec.dims))
    n_train = int(spec.samples_per_class * 0.8)
    train_parts, test_parts = [], []
    train_labels, test_labels = [], []
    for c in range(spec.classes):
        noise = rs.normal(0.0, 1.0, (spec.samples_per_class, spec.dims))
        samples = np.clip(centers[c] + spec.cluster_spread * noise, 0.0, 1.0)
        train_parts.append(samples[:n_train])
        test_parts.append(samples[n_train:])
        train_labels.append(np.full(n_train, c, dtype=np.int64))
        test_labels.append(np.full(spec.samples_per_class - n_train, c, dtype=np.int64))
    return TaskDataset(
        task_id=0,
        train_images=np.ascontiguousarray(np.concatenate(train_parts)),
        train_labels=np.concatenate(train_labels),
        test_images=np.ascontiguousarray(np.concatenate(test_parts)),
        test_labels=np.concatenate(test_labels),
        permutation=np.arange(spec.dims),
    )


def apply_permutation(images: np.ndarray, permutation: np.ndarray) -> np.ndarray:
    """Reorder pixel columns: output column j holds input column permutation[j]."""
    return np.ascontiguousarray(images[:, permutation])


def invert_permutation(permutation: np.ndarray) -> np.ndarray:
    inverse = np.empty_like(permutation)
    inverse[permutation] = np.arange(len(permutation))
    return inverse


def make_permuted_tasks(
    base_train: tuple[np.ndarray, np.ndarray],
    base_test: tuple[np.ndarray, np.ndarray],
    num_tasks: int,
    seed: int,
    permute_first_task: bool = False,
    expected_width: int = 784,
) -> list[TaskDataset]:
    """Derive ``num_tasks`` permuted tasks from one base dataset.

    Task ``t`` applies a single pixel permutation, a deterministic
    function of ``(seed, t)``, to every train and test image. Task 0 keeps
    the identity permutation unless ``permute_first_task`` is set, so
    first-task curves stay comparable with an unpermuted baseline.
    """
    if num_tasks < 1:
        raise ValueError(f"num_tasks must be >= 1, got {num_tasks}")
    train_images, train_labels = base_train
    test_images, test_labels = base_test
    if train_images.shape[1] != expected_width or test_images.shape[1] != expected_width:
        raise ShapeError(
            f"expected image width {expected_width}, got train {train_images.shape[1]} "
            f"/ test {test_images.shape[1]}"
        )
    root = RandomStream(seed)
    tasks = []
    for t in range(num_tasks):
        if t == 0 and not permute_first_task:
            perm = np.arange(expected_width)
        else:
            perm = root.child(PERMUTATION_STREAM_ID, t).permutation(expected_width)
        tasks.append(
            TaskDataset(
                task_id=t,
                train_images=apply_permutation(train_images, perm),
                train_labels=train_labels.copy(),
                test_images=apply_permutation(test_images, perm),
                test_labels=test_labels.copy(),
                permutation=perm,
            )
        )
    return tasks


def batches(dataset: TaskDataset, batch_size: int, stream: RandomStream):
    """Yield one epoch of seeded minibatches over the train split.

    The epoch is a fresh shuffle of all train rows drawn from ``stream``,
    sliced into consecutive batches; a final short batch is kept. Calling
    again with the same (advancing) stream yields the next epoch's order.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = dataset.train_images.shape[0]
    if n == 0:
        raise ValueError("cannot iterate batches of an empty dataset")
    order = stream.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield dataset.train_images[idx], dataset.train_labels[idx]
