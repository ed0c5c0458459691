"""Datasets, the MNIST IDX codec, synthetic blobs, and the MIA split plan."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, SizingError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ContractError(f"features {x.shape} and labels {y.shape} disagree")
        if not np.all(np.isfinite(x)):
            raise ContractError("features must be finite")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")
        missing = sorted(set(range(self.num_classes)) - set(np.unique(y).tolist()))
        if missing:
            raise ContractError(f"classes {missing} have no examples")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(indices, dtype=np.int64)
        return self.features[idx], self.labels[idx]


# --- MNIST IDX -------------------------------------------------------------


def _read_header(buf: bytes, path, n_dims: int, magic: int) -> tuple[int, ...]:
    need = 4 * (1 + n_dims)
    if len(buf) < need:
        raise FormatError(f"{path}: truncated header at offset {len(buf)}, need {need} bytes")
    got = struct.unpack_from(">I", buf, 0)[0]
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x} at offset 0 (expected 0x{magic:08x})")
    return struct.unpack_from(f">{n_dims}I", buf, 4)


def load_mnist_idx(images_path, labels_path, name: str = "mnist") -> Dataset:
    """Parse an IDX image/label file pair into a Dataset scaled to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    img = images_path.read_bytes()
    lab = labels_path.read_bytes()

    count, rows, cols = _read_header(img, images_path, 3, IDX_IMAGES_MAGIC)
    (n_labels,) = _read_header(lab, labels_path, 1, IDX_LABELS_MAGIC)
    if count != n_labels:
        raise FormatError(
            f"{labels_path}: count mismatch at offset 4: {n_labels} labels vs {count} images"
        )
    pixels = count * rows * cols
    if len(img) - 16 < pixels:
        raise FormatError(
            f"{images_path}: truncated at offset {len(img)}: expected {pixels} pixel bytes from offset 16"
        )
    if len(lab) - 8 < count:
        raise FormatError(
            f"{labels_path}: truncated at offset {len(lab)}: expected {count} label bytes from offset 8"
        )
    x = np.frombuffer(img, dtype=np.uint8, count=pixels, offset=16).reshape(count, rows * cols)
    y = np.frombuffer(lab, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    if count and y.max() > 9:
        bad = int(np.argmax(y > 9))
        raise FormatError(f"{labels_path}: label {y[bad]} out of range at offset {8 + bad}")
    return Dataset(x.astype(np.float64) / 255.0, y, num_classes=10, name=name)


def write_mnist_idx(dataset: Dataset, images_path, labels_path, image_shape=None) -> None:
    """Write features (rounded to bytes via x*255) and labels as an IDX pair."""
    n, d = dataset.features.shape
    if image_shape is None:
        image_shape = (28, 28) if d == 784 else (1, d)
    rows, cols = image_shape
    if rows * cols != d:
        raise ContractError(f"image shape {image_shape} does not hold {d} features")
    if dataset.labels.max() > 255:
        raise ContractError("IDX labels are single bytes")
    pixels = np.clip(np.rint(dataset.features * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


# --- synthetic blobs -------------------------------------------------------


@dataclass(frozen=True)
class BlobSpec:
    num_classes: int = 10
    points_per_class: int = 400
    dimension: int = 20
    separation: float = 3.0
    spread: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.points_per_class < 1 or self.dimension < 1:
            raise ContractError(f"invalid blob sizes: {self}")
        if not (self.separation > 0 and self.spread > 0):
            raise ContractError("separation and spread must be positive")
        if self.dimension < 2 and self.num_classes > 2:
            raise ContractError("more than two classes need dimension >= 2")


def blob_centers(num_classes: int, dimension: int, separation: float) -> np.ndarray:
    """Class centers with every pair exactly ``separation`` apart when possible.

    Uses scaled basis vectors (a regular simplex) if there is room, otherwise
    a regular polygon in the first two coordinates.
    """
    centers = np.zeros((num_classes, dimension))
    if dimension >= num_classes:
        centers[np.arange(num_classes), np.arange(num_classes)] = separation / np.sqrt(2.0)
    elif num_classes == 2:
        centers[0, 0] = -separation / 2.0
        centers[1, 0] = separation / 2.0
    else:
        radius = separation / (2.0 * np.sin(np.pi / num_classes))
        angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
        centers[:, 0] = radius * np.cos(angles)
        centers[:, 1] = radius * np.sin(angles)
    return centers


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    span[span == 0] = 1.0
    return (x - lo) / span


def make_blobs(spec: BlobSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    centers = blob_centers(spec.num_classes, spec.dimension, spec.separation)
    y = np.repeat(np.arange(spec.num_classes), spec.points_per_class)
    x = centers[y] + rng.normal(0.0, spec.spread, size=(y.size, spec.dimension))
    order = rng.permutation(y.size)
    return Dataset(
        minmax_normalize(x[order]),
        y[order],
        spec.num_classes,
        name=f"blobs-{spec.num_classes}c-{spec.dimension}d",
    )


def save_csv(dataset: Dataset, dest) -> None:
    """Write ``label,f0,f1,...`` rows, floats at 9 significant digits."""
    if hasattr(dest, "write"):
        _write_csv_rows(dataset, dest)
        return
    with open(dest, "w", newline="") as f:
        _write_csv_rows(dataset, f)


def _write_csv_rows(dataset: Dataset, f) -> None:
    w = csv.writer(f, lineterminator="\n")
    w.writerow(["label"] + [f"f{j}" for j in range(dataset.dim)])
    for label, row in zip(dataset.labels, dataset.features):
        w.writerow([int(label)] + [format(v, ".9g") for v in row])


def load_csv(path, num_classes: int | None = None, name: str | None = None) -> Dataset:
    path = Path(path)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if not header or header[0] != "label" or header[1:] != [f"f{j}" for j in range(len(header) - 1)]:
            raise FormatError(f"{path}: header must be label,f0,f1,...")
        labels, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                labels.append(int(rec[0]))
                rows.append([float(v) for v in rec[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise FormatError(f"{path}: no data rows")
    y = np.asarray(labels, dtype=np.int64)
    k = num_classes if num_classes is not None else int(y.max()) + 1
    return Dataset(np.asarray(rows), y, k, name=name or path.stem)


# --- split plan ------------------------------------------------------------


@dataclass(frozen=True)
class SplitSizes:
    target_train: int = 1000
    target_test: int = 1000
    shadow_train: int = 1000
    shadow_test: int = 1000
    eval_members: int = 500
    eval_nonmembers: int = 500

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise SizingError(f"{f.name} must be >= 0")
        if self.eval_members != self.eval_nonmembers:
            raise SizingError(
                f"attack-eval sets must be balanced: {self.eval_members} members vs "
                f"{self.eval_nonmembers} non-members"
            )

    @property
    def pool_size(self) -> int:
        return self.target_train + self.target_test + self.shadow_train + self.shadow_test


@dataclass(frozen=True, eq=False)
class SplitPlan:
    target_train: np.ndarray
    target_test: np.ndarray
    shadow_train: np.ndarray
    shadow_test: np.ndarray
    attack_eval_members: np.ndarray
    attack_eval_nonmembers: np.ndarray

    def check(self) -> None:
        """Raise ContractError if any disjointness or balance invariant fails."""
        tt, te = set(self.target_train.tolist()), set(self.target_test.tolist())
        st, se = set(self.shadow_train.tolist()), set(self.shadow_test.tolist())
        if tt & te or st & se or (tt | te) & (st | se):
            raise ContractError("split index sets overlap")
        if not set(self.attack_eval_members.tolist()) <= tt:
            raise ContractError("attack-eval members must come from target_train")
        if not set(self.attack_eval_nonmembers.tolist()) <= te:
            raise ContractError("attack-eval non-members must come from target_test")
        if len(self.attack_eval_members) != len(self.attack_eval_nonmembers):
            raise ContractError("attack-eval sets are unbalanced")

    def to_dict(self) -> dict[str, list[int]]:
        return {f.name: getattr(self, f.name).tolist() for f in fields(self)}


def make_split(dataset: Dataset | int, sizes: SplitSizes, seed) -> SplitPlan:
    """Draw disjoint target/shadow splits uniformly without replacement."""
    n = dataset if isinstance(dataset, int) else len(dataset)
    if sizes.pool_size > n:
        raise SizingError(f"split needs {sizes.pool_size} examples, dataset has {n}")
    if sizes.eval_members > sizes.target_train:
        raise SizingError(
            f"eval_members needs {sizes.eval_members} examples, target_train has {sizes.target_train}"
        )
    if sizes.eval_nonmembers > sizes.target_test:
        raise SizingError(
            f"eval_nonmembers needs {sizes.eval_nonmembers} examples, target_test has {sizes.target_test}"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    bounds = np.cumsum(
        [0, sizes.target_train, sizes.target_test, sizes.shadow_train, sizes.shadow_test]
    )
    tt, te, st, se = (np.sort(perm[a:b]) for a, b in zip(bounds[:-1], bounds[1:]))
    members = np.sort(rng.choice(tt, size=sizes.eval_members, replace=False))
    nonmembers = np.sort(rng.choice(te, size=sizes.eval_nonmembers, replace=False))
    return SplitPlan(tt, te, st, se, members, nonmembers)
