"""
Synthetic fine-grained datasets, the MXDS binary format, CSV import and batching.

The generator builds nested Gaussian clusters: G well separated coarse centres,
each surrounded by closely packed subclass centres. Classes inside a coarse
group are hard to tell apart; groups themselves are trivial to tell apart.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"MXDS"
VERSION = 1
NO_COARSE = 0xFFFFFFFF
SPLITS = ("train", "test", "none")


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DatasetVersionError(DatasetFormatError):
    pass


@dataclass
class Dataset:
    features: np.ndarray  # (T, *feature_shape) float64
    labels: np.ndarray  # (T,) int64
    num_classes: int
    coarse: np.ndarray | None = None  # (T,) int64, -1 when unknown
    split: str = "none"
    id_start: int = 0

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.coarse is None:
            self.coarse = np.full(len(self.labels), -1, dtype=np.int64)
        self.coarse = np.asarray(self.coarse, dtype=np.int64)
        if len(self.labels) == 0:
            raise ValueError("dataset is empty")
        if self.features.shape[0] != len(self.labels) or len(self.coarse) != len(self.labels):
            raise ValueError("features, labels and coarse ids must have one row per sample")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")

    def __len__(self):
        return len(self.labels)

    @property
    def feature_shape(self) -> tuple:
        return self.features.shape[1:]

    @property
    def ids(self) -> np.ndarray:
        return self.id_start + np.arange(len(self))

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.num_classes,
                       self.coarse[indices], self.split, self.id_start)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.split == other.split
            and self.id_start == other.id_start
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.coarse, other.coarse)
        )


@dataclass
class SynthSpec:
    num_coarse_groups: int = 2
    subclasses_per_group: int = 4
    samples_per_subclass: int = 100
    test_samples_per_subclass: int = 50
    feature_dim: int = 16
    coarse_separation: float = 20.0
    fine_separation: float = 2.0
    noise_sigma: float = 1.0
    seed: int = 0
    image: bool = False
    image_block: int = 2

    def validate(self) -> None:
        counts = [self.num_coarse_groups, self.subclasses_per_group, self.samples_per_subclass,
                  self.test_samples_per_subclass, self.feature_dim, self.image_block]
        if any(int(c) < 1 for c in counts):
            raise ValueError("synthetic dataset counts must be positive")
        if not (0 < self.fine_separation < self.coarse_separation):
            raise ValueError("need 0 < fine_separation < coarse_separation")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.image and int(np.sqrt(self.feature_dim)) ** 2 != self.feature_dim:
            raise ValueError("image mode needs a square feature_dim")


def _unit_directions(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    """Orthonormal directions when count <= dim, otherwise random unit vectors."""
    if count <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, count)))
        return q.T
    v = rng.standard_normal((count, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass
class SynthCenters:
    coarse: np.ndarray  # (G, D)
    fine: np.ndarray  # (G * S, D), row index == class label


def synth_centers(spec: SynthSpec) -> SynthCenters:
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0])
    G, S, D = spec.num_coarse_groups, spec.subclasses_per_group, spec.feature_dim
    if G == 1:
        coarse = np.zeros((1, D))
    elif G <= D:
        # orthonormal vertices scaled so every pair is exactly coarse_separation apart
        coarse = _unit_directions(rng, G, D) * spec.coarse_separation / np.sqrt(2.0)
    else:
        coarse = _spread_points(rng, G, D, spec.coarse_separation)
    fine = np.concatenate([c + spec.fine_separation * _unit_directions(rng, S, D) for c in coarse])
    return SynthCenters(coarse, fine)


def _spread_points(rng, count, dim, min_dist):
    # more groups than dimensions: rejection-sample on a growing sphere
    radius = min_dist
    while True:
        pts = _unit_directions(rng, count, dim) * radius
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        if d.min() >= min_dist:
            return pts
        radius *= 1.25


def to_images(features: np.ndarray, block: int) -> np.ndarray:
    """Render each feature as a block x block patch of a single-channel square image."""
    side = int(round(np.sqrt(features.shape[1])))
    grid = features.reshape(-1, side, side)
    return np.kron(grid, np.ones((block, block)))[:, None]


def generate_synthetic(spec: SynthSpec) -> tuple[Dataset, Dataset]:
    """Train and test splits drawn around the same class centres."""
    centers = synth_centers(spec)
    rng = np.random.default_rng([spec.seed, 1])
    n_cls = len(centers.fine)

    def draw(per_class, split, id_start):
        labels = np.repeat(np.arange(n_cls), per_class)
        x = centers.fine[labels] + spec.noise_sigma * rng.standard_normal((len(labels), spec.feature_dim))
        if spec.image:
            x = to_images(x, spec.image_block)
        return Dataset(x, labels, n_cls, labels // spec.subclasses_per_group, split, id_start)

    train = draw(spec.samples_per_subclass, "train", 0)
    test = draw(spec.test_samples_per_subclass, "test", len(train))
    return train, test


def nearest_center_accuracy(features, targets, centers) -> float:
    """Fraction of rows whose nearest centre (Euclidean) has the target index."""
    d = ((features[:, None, :] - centers[None]) ** 2).sum(-1)
    return float(np.mean(d.argmin(axis=1) == targets))


# -----------------------------------------------------------------------------
# MXDS binary format (little-endian)
#   magic "MXDS" | version u32 | num_classes u32 | count u64 | split u8 | id_start u64
#   | rank u32 | dims u32[rank] | count x (label u32, coarse u32, features f64[prod(dims)])
# -----------------------------------------------------------------------------

_HEAD = struct.Struct("<4sIIQBQI")


def dataset_to_bytes(ds: Dataset) -> bytes:
    shape = ds.feature_shape
    head = _HEAD.pack(MAGIC, VERSION, ds.num_classes, len(ds), SPLITS.index(ds.split), ds.id_start, len(shape))
    dims = struct.pack(f"<{len(shape)}I", *shape)
    rec = np.dtype([("label", "<u4"), ("coarse", "<u4"), ("x", "<f8", (int(np.prod(shape)),))])
    body = np.empty(len(ds), dtype=rec)
    body["label"] = ds.labels
    body["coarse"] = np.where(ds.coarse < 0, NO_COARSE, ds.coarse)
    body["x"] = ds.features.reshape(len(ds), -1)
    return head + dims + body.tobytes()


def dataset_from_bytes(buf: bytes) -> Dataset:
    if len(buf) < _HEAD.size:
        raise DatasetFormatError("truncated header", len(buf))
    magic, version, n_cls, count, split, id_start, rank = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise DatasetVersionError(f"unsupported MXDS version {version} (expected {VERSION})", 4)
    if split >= len(SPLITS):
        raise DatasetFormatError(f"bad split tag {split}", 20)
    off = _HEAD.size
    if len(buf) < off + 4 * rank:
        raise DatasetFormatError("truncated shape block", len(buf))
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    width = int(np.prod(shape))
    rec = np.dtype([("label", "<u4"), ("coarse", "<u4"), ("x", "<f8", (width,))])
    need = off + count * rec.itemsize
    if len(buf) != need:
        where = min(len(buf), need)
        raise DatasetFormatError(f"expected {count} records ending at byte {need}, file has {len(buf)} bytes", where)
    body = np.frombuffer(buf, dtype=rec, count=count, offset=off)
    labels = body["label"].astype(np.int64)
    bad = np.nonzero(labels >= n_cls)[0]
    if len(bad):
        raise DatasetFormatError(f"label {labels[bad[0]]} >= num_classes {n_cls}", off + int(bad[0]) * rec.itemsize)
    coarse = body["coarse"].astype(np.int64)
    coarse[coarse == NO_COARSE] = -1
    try:
        return Dataset(body["x"].reshape((count, *shape)), labels, n_cls, coarse, SPLITS[split], id_start)
    except ValueError as err:
        raise DatasetFormatError(str(err), off) from err


def save_dataset(path, ds: Dataset) -> None:
    with open(path, "wb") as f:
        f.write(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        return dataset_from_bytes(f.read())


def load_csv(path, num_classes: int | None = None) -> Dataset:
    """Rows of ``label,feat1,...,featD``; a non-numeric first row is taken as a header."""
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r]
    if rows:
        try:
            int(rows[0][0])
        except ValueError:
            rows = rows[1:]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise ValueError(f"{path}: row {i} has {len(r)} fields, expected {width}")
    labels = np.array([int(r[0]) for r in rows])
    x = np.array([[float(v) for v in r[1:]] for r in rows])
    return Dataset(x, labels, num_classes or int(labels.max()) + 1)


# -----------------------------------------------------------------------------
# Batching
# -----------------------------------------------------------------------------


@dataclass
class BatchIterator:
    """Seeded mini-batches over ``indices`` (all samples by default).

    The order of epoch ``e`` depends only on (seed, e, the index set), so
    iterating epochs out of order or from a fresh iterator repeats it exactly.
    """

    dataset: Dataset
    batch_size: int
    seed: int = 0
    indices: np.ndarray | None = None
    epoch: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.indices is None:
            self.indices = np.arange(len(self.dataset))
        self.indices = np.sort(np.asarray(self.indices, dtype=np.int64))

    def order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, epoch])
        return self.indices[rng.permutation(len(self.indices))]

    def batches(self, epoch: int | None = None):
        """Yield ``(inputs, labels, indices)`` for one epoch and advance the counter."""
        if epoch is None:
            epoch = self.epoch
        self.epoch = epoch + 1
        order = self.order(epoch)
        for start in range(0, len(order), self.batch_size):
            idx = order[start : start + self.batch_size]
            yield self.dataset.features[idx], self.dataset.labels[idx], idx

    def __iter__(self):
        return self.batches()
