"""Datasets, partitioning and loaders.

Synthetic Gaussian blobs for fast experiments, an IDX loader for MNIST
style files, iid and label-skew client partitioning, and the CSV /
JSON plan formats the CLI reads and writes.
"""

from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import seeds


class FormatError(Exception):
    """A data file does not match its declared format."""


@dataclass
class Dataset:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64
    classes: int
    provenance: str = ""
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-d, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match {self.features.shape[0]} rows"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(
                f"labels must lie in [0, {self.classes}), got {self.labels.min()}..{self.labels.max()}"
            )

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def standardize(features: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shift to zero mean, scale to unit std per feature. Constant features
    keep their centered values (std treated as 1)."""
    features = np.asarray(features, dtype=np.float64)
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return (features - mean) / std, mean, std


def apply_standardize(features, mean, std) -> np.ndarray:
    return (np.asarray(features, dtype=np.float64) - mean) / std


def _blob_means(classes: int, dim: int) -> np.ndarray:
    """Deterministic class centers: evenly spaced on a line for dim=1,
    otherwise on the unit circle in the first two coordinates."""
    means = np.zeros((classes, dim))
    if dim == 1:
        means[:, 0] = np.linspace(-1.0, 1.0, classes)
    else:
        angles = 2.0 * np.pi * np.arange(classes) / classes
        means[:, 0] = np.cos(angles)
        means[:, 1] = np.sin(angles)
    return means


def gen_synthetic(classes: int, dim: int, per_class: int, spread: float, seed: int) -> Dataset:
    """Isotropic Gaussian blobs, standardized over the generated pool."""
    if classes < 2 or dim < 1 or per_class < 1:
        raise ValueError(f"bad blob shape: classes={classes} dim={dim} per_class={per_class}")
    if spread < 0:
        raise ValueError(f"spread must be >= 0, got {spread}")
    rng = seeds.stream(seed, seeds.PURPOSE_DATA)
    means = _blob_means(classes, dim)
    labels = np.repeat(np.arange(classes), per_class)
    noise = rng.standard_normal((classes * per_class, dim))
    features = means[labels] + spread * noise
    features, mean, std = standardize(features)
    return Dataset(
        features,
        labels,
        classes,
        provenance=f"synthetic(classes={classes},dim={dim},per_class={per_class},spread={spread},seed={seed})",
        norm_mean=mean,
        norm_std=std,
    )


# ---- IDX (MNIST style) ---------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _open_maybe_gz(path):
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx_images(path) -> np.ndarray:
    """Images as (n, rows*cols) float64 scaled to [0, 1]."""
    with _open_maybe_gz(path) as fh:
        head = fh.read(16)
        if len(head) < 16:
            raise FormatError(f"{path}: truncated header, got {len(head)} bytes")
        magic, n, rows, cols = struct.unpack(">iiii", head)
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(
                f"{path}: image magic must be 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}"
            )
        body = fh.read(n * rows * cols + 1)
    if len(body) != n * rows * cols:
        raise FormatError(
            f"{path}: expected {n * rows * cols} pixel bytes, found {len(body)}"
        )
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(n, rows * cols)
    return pixels.astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    with _open_maybe_gz(path) as fh:
        head = fh.read(8)
        if len(head) < 8:
            raise FormatError(f"{path}: truncated header, got {len(head)} bytes")
        magic, n = struct.unpack(">ii", head)
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(
                f"{path}: label magic must be 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}"
            )
        body = fh.read(n + 1)
    if len(body) != n:
        raise FormatError(f"{path}: expected {n} label bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).astype(np.int64)


def load_idx_split(images_path, labels_path, classes: int = 10, stats=None) -> Dataset:
    """One (images, labels) pair. Pass stats=(mean, std) from the training
    split to transform a test split consistently."""
    X = load_idx_images(images_path)
    y = load_idx_labels(labels_path)
    if X.shape[0] != y.shape[0]:
        raise FormatError(
            f"image count {X.shape[0]} does not match label count {y.shape[0]}"
        )
    if stats is None:
        X, mean, std = standardize(X)
    else:
        mean, std = stats
        X = apply_standardize(X, mean, std)
    return Dataset(X, y, classes, provenance=f"idx({images_path})", norm_mean=mean, norm_std=std)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist(root) -> dict | None:
    """Locate the four standard files under root, raw or gzipped."""
    from pathlib import Path

    root = Path(root)
    found = {}
    for split, (img, lab) in MNIST_FILES.items():
        pair = []
        for name in (img, lab):
            if (root / name).exists():
                pair.append(root / name)
            elif (root / (name + ".gz")).exists():
                pair.append(root / (name + ".gz"))
            else:
                return None
        found[split] = tuple(pair)
    return found


def load_mnist(root) -> tuple[Dataset, Dataset]:
    """Train and test sets; the test set reuses the training transform."""
    paths = find_mnist(root)
    if paths is None:
        raise FileNotFoundError(f"MNIST idx files not found under {root}")
    train = load_idx_split(*paths["train"])
    test = load_idx_split(*paths["test"], stats=(train.norm_mean, train.norm_std))
    return train, test


# ---- partitioning --------------------------------------------------------


@dataclass
class PartitionPlan:
    client_indices: list[np.ndarray]
    unlabeled_indices: np.ndarray
    test_indices: np.ndarray
    mode: str
    major_classes: list[list[int]] = field(default_factory=list)

    @property
    def clients(self) -> int:
        return len(self.client_indices)

    def client_sizes(self) -> list[int]:
        return [len(ix) for ix in self.client_indices]


def partition(
    dataset: Dataset,
    clients: int,
    mode: str,
    sizes,
    server_unlabeled: int,
    seed: int,
    major: int = 2,
) -> PartitionPlan:
    """Assign dataset rows to K clients, a server unlabeled pool and a test
    remainder. All index lists are disjoint; the server pool is exposed
    without labels downstream.

    label_skew gives each client `major` randomly assigned classes holding
    at least 90% of its samples, the rest drawn uniformly from the other
    classes.
    """
    if isinstance(sizes, int):
        sizes = [sizes] * clients
    sizes = [int(s) for s in sizes]
    if clients < 1 or len(sizes) != clients:
        raise ValueError(f"need one size per client, got {len(sizes)} for {clients}")
    if any(s < 1 for s in sizes):
        raise ValueError(f"client sizes must be >= 1, got {sizes}")
    if server_unlabeled < 0:
        raise ValueError(f"server_unlabeled must be >= 0, got {server_unlabeled}")
    total_needed = sum(sizes) + server_unlabeled
    if total_needed > dataset.n:
        raise ValueError(
            f"partition needs {total_needed} rows but dataset has {dataset.n} "
            f"(short by {total_needed - dataset.n})"
        )

    rng = seeds.stream(seed, seeds.PURPOSE_PARTITION)

    if mode == "iid":
        order = rng.permutation(dataset.n)
        client_idx = []
        off = 0
        for s in sizes:
            client_idx.append(np.sort(order[off : off + s]))
            off += s
        unlabeled = np.sort(order[off : off + server_unlabeled])
        off += server_unlabeled
        test = np.sort(order[off:])
        return PartitionPlan(client_idx, unlabeled, test, mode="iid")

    if mode != "label_skew":
        raise ValueError(f"mode must be 'iid' or 'label_skew', got {mode!r}")
    if not 1 <= major <= dataset.classes:
        raise ValueError(f"major classes must lie in [1, {dataset.classes}], got {major}")

    # per-class index pools, consumed from the end
    pools = []
    for c in range(dataset.classes):
        members = np.flatnonzero(dataset.labels == c)
        pools.append(list(rng.permutation(members)))

    client_idx = []
    majors: list[list[int]] = []
    for k, n_k in enumerate(sizes):
        chosen = sorted(int(c) for c in rng.choice(dataset.classes, size=major, replace=False))
        majors.append(chosen)
        n_major = int(np.ceil(0.9 * n_k))
        picked: list[int] = []
        base, extra = divmod(n_major, major)
        for j, c in enumerate(chosen):
            want = base + (1 if j < extra else 0)
            if len(pools[c]) < want:
                raise ValueError(
                    f"client {k}: class {c} pool short by {want - len(pools[c])} rows"
                )
            for _ in range(want):
                picked.append(int(pools[c].pop()))
        n_minor = n_k - n_major
        if n_minor > 0:
            others = [c for c in range(dataset.classes) if c not in chosen]
            remaining = [i for c in others for i in pools[c]]
            if len(remaining) < n_minor:
                raise ValueError(
                    f"client {k}: minor pool short by {n_minor - len(remaining)} rows"
                )
            take = rng.choice(len(remaining), size=n_minor, replace=False)
            taken = {int(remaining[t]) for t in take}
            picked.extend(sorted(taken))
            for c in others:
                pools[c] = [i for i in pools[c] if int(i) not in taken]
        client_idx.append(np.sort(np.asarray(picked, dtype=np.int64)))

    residual = np.asarray([int(i) for pool in pools for i in pool], dtype=np.int64)
    residual = residual[rng.permutation(len(residual))]
    unlabeled = np.sort(residual[:server_unlabeled])
    test = np.sort(residual[server_unlabeled:])
    return PartitionPlan(client_idx, unlabeled, test, mode="label_skew", major_classes=majors)


def client_data(dataset: Dataset, plan: PartitionPlan, k: int) -> tuple[np.ndarray, np.ndarray]:
    ix = plan.client_indices[k]
    return dataset.features[ix], dataset.labels[ix]


def unlabeled_features(dataset: Dataset, plan: PartitionPlan) -> np.ndarray:
    # labels deliberately never leave this function
    return dataset.features[plan.unlabeled_indices].copy()


def evaluation_split(dataset: Dataset, plan: PartitionPlan) -> tuple[np.ndarray, np.ndarray]:
    ix = plan.test_indices
    return dataset.features[ix], dataset.labels[ix]


# ---- OOD pairs -----------------------------------------------------------


def make_ood_pair(dataset: Dataset, strategy: str, *, offset: float = 0.0, held_out=None):
    """Build (in_features, ood_features) for detection experiments.

    shifted_blobs translates the whole cloud by `offset` along the last
    feature axis.  The offset is expressed in the dataset's original units:
    for a standardized dataset the stored per-feature scale converts it, so
    offset = 10x the generator noise scale lands ten standard deviations
    off the training cloud no matter how the features were normalized.
    held_out_classes uses rows of the given classes as OOD and the rest as
    in-distribution.
    """
    if strategy == "shifted_blobs":
        scale = 1.0 if dataset.norm_std is None else float(dataset.norm_std[-1])
        shift = np.zeros(dataset.dim)
        shift[-1] = offset / scale
        return dataset.features.copy(), dataset.features + shift
    if strategy == "held_out_classes":
        held = set(int(c) for c in (held_out or []))
        if not held:
            raise ValueError("held_out_classes needs a non-empty class set")
        bad = [c for c in held if not 0 <= c < dataset.classes]
        if bad:
            raise ValueError(f"held-out classes {bad} outside [0, {dataset.classes})")
        mask = np.isin(dataset.labels, sorted(held))
        if mask.all() or not mask.any():
            raise ValueError("held-out split leaves one side empty")
        return dataset.features[~mask].copy(), dataset.features[mask].copy()
    raise ValueError(f"strategy must be 'shifted_blobs' or 'held_out_classes', got {strategy!r}")


# ---- file formats --------------------------------------------------------


def write_csv(dataset: Dataset, path) -> None:
    """Header row, features then the label in the final column."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{j}" for j in range(dataset.dim)] + ["label"])
        for i in range(dataset.n):
            writer.writerow([repr(float(v)) for v in dataset.features[i]] + [int(dataset.labels[i])])


def read_csv(path, classes: int | None = None, provenance: str = "") -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if not header or header[-1] != "label":
            raise FormatError(f"{path}: final column must be 'label', got {header[-1:]}")
        dim = len(header) - 1
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != dim + 1:
                raise FormatError(f"{path}:{lineno}: expected {dim + 1} columns, got {len(row)}")
            try:
                feats.append([float(v) for v in row[:-1]])
                labels.append(int(row[-1]))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    labels = np.asarray(labels, dtype=np.int64)
    if classes is None:
        classes = int(labels.max()) + 1 if labels.size else 2
    return Dataset(np.asarray(feats), labels, classes, provenance=provenance or f"csv({path})")


def save_plan(plan: PartitionPlan, path) -> None:
    doc = {
        "format": "bayesfed-partition",
        "mode": plan.mode,
        "clients": [ix.tolist() for ix in plan.client_indices],
        "unlabeled": plan.unlabeled_indices.tolist(),
        "test": plan.test_indices.tolist(),
        "major_classes": plan.major_classes,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_plan(path) -> PartitionPlan:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != "bayesfed-partition":
        raise FormatError(f"{path}: field 'format' must be 'bayesfed-partition'")
    for key in ("mode", "clients", "unlabeled", "test"):
        if key not in doc:
            raise FormatError(f"{path}: field {key!r} missing")
    return PartitionPlan(
        [np.asarray(ix, dtype=np.int64) for ix in doc["clients"]],
        np.asarray(doc["unlabeled"], dtype=np.int64),
        np.asarray(doc["test"], dtype=np.int64),
        mode=str(doc["mode"]),
        major_classes=[list(map(int, m)) for m in doc.get("major_classes", [])],
    )
