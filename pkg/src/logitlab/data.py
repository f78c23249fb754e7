"""Dataset provisioning.

A seeded synthetic generator with a two-level class hierarchy (so that
non-target probability mass carries real structure), symmetric label
noise injection, big-endian IDX file ingestion, CSV export/import, and
deterministic splits and batch iteration.

Datasets are immutable after construction; every operation returns a new
dataset and draws from its own named RNG stream.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .rng import purpose_rng

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Raised when an IDX file is malformed; the message names the offset."""


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray  # (N, D) float64
    labels: np.ndarray  # (N,) int64 in [0, class_count)
    class_count: int
    clean_labels: np.ndarray | None = None  # pre-noise labels
    noise_mask: np.ndarray | None = None  # True where label was corrupted
    metadata: str = ""

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError(f"features must be (N>=1, D>=1), got {X.shape}")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if y.shape != (X.shape[0],):
            raise ValueError("labels must be one integer per sample")
        if y.min() < 0 or y.max() >= self.class_count:
            raise ValueError("labels out of range")
        if self.clean_labels is not None:
            cl = np.asarray(self.clean_labels, dtype=np.int64)
            object.__setattr__(self, "clean_labels", cl)
            if cl.shape != y.shape:
                raise ValueError("clean_labels must match labels in shape")
        if self.noise_mask is not None:
            if self.clean_labels is None:
                raise ValueError("noise_mask requires clean_labels")
            nm = np.asarray(self.noise_mask, dtype=bool)
            object.__setattr__(self, "noise_mask", nm)
            if not np.array_equal(nm, y != self.clean_labels):
                raise ValueError("noise_mask inconsistent with labels vs clean_labels")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class SyntheticSpec:
    """Hierarchical Gaussian mixture: K superclasses x M subclasses.

    Superclass centers spread with sigma_super, subclass centers around
    them with sigma_sub, samples around those with noise_std. Fine-class
    labels are k*M + m. Requires sigma_super > sigma_sub > 0 so siblings
    stay closer to each other than to foreign subclasses.
    """

    superclass_count: int = 5
    subclasses_per_superclass: int = 4
    dimension: int = 32
    samples_per_class: int = 200
    superclass_spread: float = 3.0
    subclass_spread: float = 1.0
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("superclass_count", "subclasses_per_superclass", "dimension", "samples_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.superclass_count * self.subclasses_per_superclass < 2:
            raise ValueError("need at least 2 fine classes")
        if not self.superclass_spread > self.subclass_spread > 0.0:
            raise ValueError("require superclass_spread > subclass_spread > 0")
        if self.noise_std <= 0.0:
            raise ValueError("noise_std must be positive")

    @property
    def class_count(self) -> int:
        return self.superclass_count * self.subclasses_per_superclass

    def superclass_of(self, label) -> np.ndarray:
        return np.asarray(label) // self.subclasses_per_superclass


def gen_hierarchical_gaussians(spec: SyntheticSpec) -> LabeledDataset:
    """Sample the hierarchical mixture; deterministic per spec.seed."""
    k, m, d, n = (spec.superclass_count, spec.subclasses_per_superclass,
                  spec.dimension, spec.samples_per_class)
    supers = purpose_rng(spec.seed, "superclass_centers").normal(0.0, spec.superclass_spread, (k, d))
    subs = supers[:, None, :] + purpose_rng(spec.seed, "subclass_centers").normal(
        0.0, spec.subclass_spread, (k, m, d))
    sample_rng = purpose_rng(spec.seed, "samples")
    centers = subs.reshape(k * m, d)
    features = np.repeat(centers, n, axis=0) + sample_rng.normal(0.0, spec.noise_std, (k * m * n, d))
    labels = np.repeat(np.arange(k * m, dtype=np.int64), n)
    meta = json.dumps({"generator": "hierarchical_gaussians", **_spec_dict(spec)})
    return LabeledDataset(features=features, labels=labels, class_count=k * m, metadata=meta)


def _spec_dict(spec: SyntheticSpec) -> dict:
    return {
        "superclass_count": spec.superclass_count,
        "subclasses_per_superclass": spec.subclasses_per_superclass,
        "dimension": spec.dimension,
        "samples_per_class": spec.samples_per_class,
        "superclass_spread": spec.superclass_spread,
        "subclass_spread": spec.subclass_spread,
        "noise_std": spec.noise_std,
        "seed": spec.seed,
    }


def inject_symmetric_noise(dataset: LabeledDataset, ratio: float, seed: int = 0) -> LabeledDataset:
    """Corrupt each label independently with probability `ratio`.

    A corrupted label is redrawn uniformly from the other C-1 classes,
    so every selected sample really changes class and the noise mask is
    exactly the selection mask. Features are untouched. The dataset's
    current labels are taken as the clean reference.
    """
    r = float(ratio)
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"noise ratio must be in [0, 1], got {ratio!r}")
    clean = (dataset.clean_labels if dataset.clean_labels is not None else dataset.labels).copy()
    rng = purpose_rng(seed, "noise")
    flip = rng.random(dataset.n_samples) < r
    # Uniform over the other C-1 classes: draw an offset in [1, C-1].
    offsets = rng.integers(1, dataset.class_count, size=dataset.n_samples)
    noisy = clean.copy()
    noisy[flip] = (clean[flip] + offsets[flip]) % dataset.class_count
    return LabeledDataset(
        features=dataset.features,
        labels=noisy,
        class_count=dataset.class_count,
        clean_labels=clean,
        noise_mask=noisy != clean,
        metadata=dataset.metadata,
    )


def split(dataset: LabeledDataset, train_fraction: float, seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded permutation, then a contiguous cut: (train, validation)."""
    f = float(train_fraction)
    if not 0.0 < f < 1.0:
        raise ValueError("train_fraction must be strictly between 0 and 1")
    n = dataset.n_samples
    n_train = int(round(n * f))
    if n_train < 1 or n_train >= n:
        raise ValueError(f"split of {n} samples at fraction {f} leaves an empty side")
    perm = purpose_rng(seed, "split").permutation(n)
    return _take(dataset, perm[:n_train]), _take(dataset, perm[n_train:])


def _take(dataset: LabeledDataset, idx: np.ndarray) -> LabeledDataset:
    return LabeledDataset(
        features=dataset.features[idx],
        labels=dataset.labels[idx],
        class_count=dataset.class_count,
        clean_labels=None if dataset.clean_labels is None else dataset.clean_labels[idx],
        noise_mask=None if dataset.noise_mask is None else dataset.noise_mask[idx],
        metadata=dataset.metadata,
    )


def batch_iter(dataset: LabeledDataset, batch_size: int, epoch_seed: int = 0, epoch: int = 0):
    """Yield index arrays covering a seeded shuffle of the dataset.

    The final partial batch is included. (epoch_seed, epoch) names the
    shuffle stream, so each epoch reshuffles reproducibly.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = purpose_rng(epoch_seed, "shuffle", index=epoch).permutation(dataset.n_samples)
    for start in range(0, dataset.n_samples, batch_size):
        yield order[start:start + batch_size]


# ---------------------------------------------------------------------------
# IDX file format (big-endian): magic, dims, raw unsigned bytes.


def read_idx_images(path) -> np.ndarray:
    """Parse an IDX image file into an (N, rows*cols) float64 matrix in [0, 1].

    Pixels are flattened row-major; byte v maps to v/255.
    """
    raw = Path(path).read_bytes()
    magic = _read_be32(raw, 0, path)
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(f"{path}: bad image magic 0x{magic:08x} at offset 0 "
                             f"(expected 0x{IDX_IMAGE_MAGIC:08x})")
    count = _read_be32(raw, 4, path)
    rows = _read_be32(raw, 8, path)
    cols = _read_be32(raw, 12, path)
    need = 16 + count * rows * cols
    if len(raw) < need:
        raise IdxFormatError(f"{path}: truncated pixel data at offset {len(raw)} "
                             f"(need {need} bytes)")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, rows * cols).astype(np.float64) / 255.0


def read_idx_labels(path) -> np.ndarray:
    """Parse an IDX label file into an (N,) int64 vector."""
    raw = Path(path).read_bytes()
    magic = _read_be32(raw, 0, path)
    if magic != IDX_LABEL_MAGIC:
        raise IdxFormatError(f"{path}: bad label magic 0x{magic:08x} at offset 0 "
                             f"(expected 0x{IDX_LABEL_MAGIC:08x})")
    count = _read_be32(raw, 4, path)
    need = 8 + count
    if len(raw) < need:
        raise IdxFormatError(f"{path}: truncated label data at offset {len(raw)} "
                             f"(need {need} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def read_idx_dataset(images_path, labels_path, class_count: int | None = None) -> LabeledDataset:
    """Pair an IDX image file with an IDX label file."""
    X = read_idx_images(images_path)
    y = read_idx_labels(labels_path)
    if X.shape[0] != y.shape[0]:
        raise IdxFormatError(f"image/label count mismatch: {X.shape[0]} images in {images_path} "
                             f"vs {y.shape[0]} labels in {labels_path}")
    c = int(class_count) if class_count is not None else int(y.max()) + 1
    return LabeledDataset(features=X, labels=y, class_count=c,
                          metadata=json.dumps({"source": "idx", "images": str(images_path),
                                               "labels": str(labels_path)}))


def write_idx_images(path, images: np.ndarray, rows: int, cols: int) -> None:
    """Write (N, rows*cols) uint8 pixel data as an IDX image file."""
    arr = np.ascontiguousarray(images, dtype=np.uint8)
    if arr.ndim != 2 or arr.shape[1] != rows * cols:
        raise ValueError(f"images must be (N, {rows * cols}) uint8, got {arr.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, arr.shape[0], rows, cols))
        f.write(arr.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    """Write (N,) labels in [0, 255] as an IDX label file."""
    arr = np.asarray(labels)
    if arr.ndim != 1 or arr.min() < 0 or arr.max() > 255:
        raise ValueError("labels must be a 1-D vector of bytes")
    with open(path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABEL_MAGIC, arr.shape[0]))
        f.write(arr.astype(np.uint8).tobytes())


def _read_be32(raw: bytes, offset: int, path) -> int:
    if len(raw) < offset + 4:
        raise IdxFormatError(f"{path}: truncated header at offset {offset}")
    return struct.unpack_from(">i", raw, offset)[0]


# ---------------------------------------------------------------------------
# CSV export: header is label,clean_label,f0..f{D-1}.


def save_csv(dataset: LabeledDataset, path) -> None:
    """Write the dataset as CSV with full-precision feature values."""
    d = dataset.dim
    clean = dataset.clean_labels if dataset.clean_labels is not None else dataset.labels
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["label", "clean_label"] + [f"f{i}" for i in range(d)])
        for i in range(dataset.n_samples):
            writer.writerow([int(dataset.labels[i]), int(clean[i])]
                            + [repr(v) for v in dataset.features[i]])


def load_csv(path, class_count: int | None = None, metadata: str = "") -> LabeledDataset:
    """Read a dataset written by save_csv.

    If class_count is not given it is inferred from the labels; a
    sidecar meta.json (written by the CLI) normally supplies it.
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[:2] != ["label", "clean_label"]:
            raise ValueError(f"{path}: unexpected CSV header {header[:2]}")
        d = len(header) - 2
        labels, clean, feats = [], [], []
        for row in reader:
            labels.append(int(row[0]))
            clean.append(int(row[1]))
            feats.append([float(v) for v in row[2:2 + d]])
    y = np.asarray(labels, dtype=np.int64)
    cl = np.asarray(clean, dtype=np.int64)
    c = int(class_count) if class_count is not None else int(max(y.max(), cl.max())) + 1
    return LabeledDataset(features=np.asarray(feats, dtype=np.float64), labels=y,
                          class_count=c, clean_labels=cl, noise_mask=y != cl,
                          metadata=metadata)


def relabel_clean(dataset: LabeledDataset) -> LabeledDataset:
    """View of the dataset with its clean labels restored (if present)."""
    if dataset.clean_labels is None:
        return dataset
    return replace(dataset, labels=dataset.clean_labels.copy(),
                   clean_labels=None, noise_mask=None)
