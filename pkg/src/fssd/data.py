"""Datasets: IDX ingestion, synthetic benchmarks, noise, splits and corruptions.

Every generator is a pure function of its arguments and seed.
"""

import csv
import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

# severity parameter per level; level 0 is the identity
GAUSSIAN_SIGMAS = (0.0, 0.02, 0.05, 0.1, 0.2, 0.3)
IMPULSE_PROBS = (0.0, 0.01, 0.03, 0.07, 0.12, 0.2)


class DataFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{self.name}: {len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ValueError(f"{self.name}: inputs must lie in [0, 1]")

    def __len__(self):
        return len(self.inputs)

    def subset(self, index, name=None):
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(self.inputs[index], self.labels[index], name or self.name)

    def reshaped(self, shape):
        return LabeledDataset(self.inputs.reshape((len(self),) + tuple(shape)), self.labels, self.name)


@dataclass
class OoDPair:
    in_dist_test: LabeledDataset
    ood_test: LabeledDataset
    val_in: LabeledDataset
    val_ood: LabeledDataset
    # indices into the source datasets, kept for contamination checks
    index: dict = field(default_factory=dict)

    def check_disjoint(self):
        for side in ("in", "ood"):
            val = self.index.get(f"val_{side}")
            test = self.index.get(f"test_{side}")
            if val is None or test is None:
                continue
            overlap = np.intersect1d(val, test)
            if overlap.size:
                raise ValueError(f"{side}: {overlap.size} samples appear in both validation and test portions")


@dataclass(frozen=True)
class CorruptionSpec:
    """Corruption kind and level 0..5; ``ladder`` overrides the default severities."""

    kind: str
    level: int
    ladder: tuple = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "impulse"):
            raise ValueError(f"corruption kind must be gaussian or impulse, got {self.kind!r}")
        if not 0 <= self.level <= 5:
            raise ValueError(f"corruption level must be in 0..5, got {self.level}")
        if self.ladder is not None:
            ladder = tuple(float(v) for v in self.ladder)
            if len(ladder) != 6 or ladder[0] != 0.0 or min(ladder) < 0:
                raise ValueError(f"a severity ladder needs 6 nonnegative values starting at 0, got {ladder}")
            if self.kind == "impulse" and max(ladder) > 1:
                raise ValueError(f"impulse probabilities must not exceed 1, got {ladder}")
            object.__setattr__(self, "ladder", ladder)

    @property
    def severity(self):
        if self.ladder is not None:
            return self.ladder[self.level]
        return (GAUSSIAN_SIGMAS if self.kind == "gaussian" else IMPULSE_PROBS)[self.level]


# ---------------------------------------------------------------- IDX files

def _read_idx(path, expected_magic):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: {len(raw)} bytes, too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: magic number {magic} at offset 0, expected {expected_magic}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: header truncated at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = int(np.prod(dims))
    if len(raw) - header != n:
        raise DataFormatError(f"{path}: expected {n} data bytes from offset {header}, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def read_idx_images(path):
    return _read_idx(path, IMAGE_MAGIC)


def read_idx_labels(path):
    return _read_idx(path, LABEL_MAGIC)


def write_idx(path, array):
    """Write a uint8 array as IDX (image magic for 3-D, label magic for 1-D)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">BBBB", 0, 0, 0x08, array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path, labels_path, name=None, limit=None):
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise DataFormatError(
            f"count mismatch: {images_path} header (offset 4) says {len(images)} images, "
            f"{labels_path} header (offset 4) says {len(labels)} labels"
        )
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    x = images.astype(np.float64) / 255.0
    if x.ndim == 3:
        x = x[:, None, :, :]
    return LabeledDataset(x, labels.astype(np.int64), name or str(images_path))


# ---------------------------------------------------------------- synthetic

def gen_blobs(n, means, spread, seed, name="blobs"):
    """Isotropic Gaussian classes around ``means`` (one row per class), clipped to [0, 1]."""
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, len(means), size=n)
    x = means[labels] + spread * rng.standard_normal((n, means.shape[1]))
    return LabeledDataset(np.clip(x, 0.0, 1.0), labels, name)


def gen_ood_ring(n, radius, seed, dim=2, center=0.5, name="ring"):
    """Points at distance ``radius`` from the cube centre in uniformly random directions."""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((n, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    x = np.clip(center + radius * u, 0.0, 1.0)
    return LabeledDataset(x, np.zeros(n, dtype=np.int64), name)


def blob_means(num_classes, dim, amplitude, seed, antipodal=False):
    """Class centres 0.5 +/- amplitude with a random sign pattern per class.

    With ``antipodal`` every odd class mirrors the preceding even class
    through the cube centre, so the centre is the average of each pair.
    """
    rng = np.random.default_rng(seed)
    means = 0.5 + amplitude * rng.choice([-1.0, 1.0], size=(num_classes, dim))
    if antipodal:
        means[1::2] = 1.0 - means[0:num_classes - num_classes % 2:2]
    return means


def uniform_noise_batch(count, input_shape, seed):
    if count < 1:
        raise ValueError("noise count must be >= 1")
    return np.random.default_rng(seed).random((count,) + tuple(input_shape))


# ---------------------------------------------------------------- corruption

def corrupt(x, spec, seed):
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    level = spec.severity
    if spec.kind == "gaussian":
        out = x + level * rng.standard_normal(x.shape)
    else:
        u = rng.random(x.shape)
        out = np.where(u < level / 2, 0.0, np.where(u < level, 1.0, x))
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- splitting

def make_pair(in_dataset, ood_dataset, n_val=1000, seed=0):
    for ds in (in_dataset, ood_dataset):
        if len(ds) < 2 * n_val:
            raise ValueError(f"{ds.name}: {len(ds)} samples, need at least {2 * n_val} for n_val={n_val}")
    rng = np.random.default_rng(seed)
    perm_in = rng.permutation(len(in_dataset))
    perm_ood = rng.permutation(len(ood_dataset))
    index = {
        "val_in": np.sort(perm_in[:n_val]),
        "test_in": np.sort(perm_in[n_val:]),
        "val_ood": np.sort(perm_ood[:n_val]),
        "test_ood": np.sort(perm_ood[n_val:]),
    }
    return OoDPair(
        in_dist_test=in_dataset.subset(index["test_in"], f"{in_dataset.name}/test"),
        ood_test=ood_dataset.subset(index["test_ood"], f"{ood_dataset.name}/test"),
        val_in=in_dataset.subset(index["val_in"], f"{in_dataset.name}/val"),
        val_ood=ood_dataset.subset(index["val_ood"], f"{ood_dataset.name}/val"),
        index=index,
    )


def export_csv(dataset, path):
    flat = dataset.inputs.reshape(len(dataset), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"x{i}" for i in range(flat.shape[1])])
        for label, row in zip(dataset.labels, flat):
            w.writerow([int(label)] + [repr(float(v)) for v in row])


def read_csv_inputs(path):
    """Read samples from a CSV with optional ``label`` column and one column per input value."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = [i for i, h in enumerate(header) if h != "label"]
    x = np.array([[float(r[i]) for i in cols] for r in body], dtype=np.float64)
    return x
