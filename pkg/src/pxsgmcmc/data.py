"""Classification datasets: synthetic generators, IDX/CSV loaders, minibatches."""
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or len(self.x) != len(self.y):
            raise InputError(f"features {self.x.shape} and labels {self.y.shape} disagree")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise InputError("labels out of range")

    def __len__(self):
        return len(self.y)

    def subset(self, idx, split=None):
        return Dataset(self.x[idx], self.y[idx], self.num_classes, split or self.split)


def _class_sizes(n, k):
    return [n // k + (1 if c < n % k else 0) for c in range(k)]


def two_moons(n, noise=0.1, rng=None):
    """Interleaved half circles; class 0 is the upper arc, class 1 the lower one."""
    n0, n1 = _class_sizes(n, 2)
    t0 = np.pi * rng.uniform(n0)
    t1 = np.pi * rng.uniform(n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([upper, lower])
    if noise > 0:
        x = x + noise * rng.gaussian(x.shape)
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    order = rng.permutation(n)
    return Dataset(x[order], y[order], 2)


def spirals(n, k=3, noise=0.1, rng=None):
    """``k`` interleaved Archimedean spiral arms, one class per arm."""
    xs, ys = [], []
    for c, size in enumerate(_class_sizes(n, k)):
        r = rng.uniform(size)
        angle = 4.0 * r + 2.0 * np.pi * c / k
        xs.append(np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1))
        ys.append(np.full(size, c, dtype=np.int64))
    x = np.concatenate(xs)
    if noise > 0:
        x = x + noise * rng.gaussian(x.shape)
    order = rng.permutation(n)
    return Dataset(x[order], np.concatenate(ys)[order], k)


def standardize(train, *others):
    """Zero-mean, unit-variance features using statistics of ``train``."""
    mean = train.x.mean(axis=0)
    std = train.x.std(axis=0)
    std[std == 0] = 1.0
    out = [Dataset((d.x - mean) / std, d.y, d.num_classes, d.split) for d in (train,) + others]
    return out[0] if not others else tuple(out)


def split(dataset, n_first):
    """Leading ``n_first`` examples as train, the rest as validation."""
    if not 0 <= n_first <= len(dataset):
        raise InputError("split point out of range")
    idx = np.arange(len(dataset))
    return dataset.subset(idx[:n_first], "train"), dataset.subset(idx[n_first:], "valid")


def _read_header(raw, magic, ndims, path):
    if len(raw) < 4 + 4 * ndims:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    (found,) = struct.unpack_from(">I", raw, 0)
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    dims = struct.unpack_from(f">{ndims}I", raw, 4)
    start = 4 + 4 * ndims
    need = start + int(np.prod(dims, dtype=np.int64))
    if len(raw) < need:
        raise FormatError(f"{path}: payload has {len(raw) - start} bytes, header declares "
                          f"{need - start}", offset=len(raw))
    return dims, start


def read_idx_images(path):
    """Raw ``uint8`` pixels of shape ``(count, rows, cols)``."""
    with open(path, "rb") as f:
        raw = f.read()
    dims, start = _read_header(raw, IDX_IMAGES_MAGIC, 3, path)
    return np.frombuffer(raw, dtype=np.uint8, count=int(np.prod(dims)), offset=start).reshape(dims)


def read_idx_labels(path):
    with open(path, "rb") as f:
        raw = f.read()
    (count,), start = _read_header(raw, IDX_LABELS_MAGIC, 1, path)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=start)


def write_idx(images_path, labels_path, images, labels):
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_idx(images_path, labels_path, num_classes=None):
    """IDX image/label pair as a dataset with pixels flattened and scaled to [0, 1]."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise InputError(f"{len(images)} images but {len(labels)} labels")
    k = num_classes or (int(labels.max()) + 1 if len(labels) else 1)
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), k)


def load_csv(path, num_classes=None):
    """Comma-separated numeric rows, label in the last column, optional header row."""
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            try:
                rows.append([float(v) for v in fields])
            except ValueError:
                if lineno == 0 and not rows:
                    continue
                raise FormatError(f"{path}: non-numeric field on line {lineno + 1}") from None
    if not rows:
        raise InputError(f"{path}: no data rows")
    if len({len(r) for r in rows}) != 1:
        raise FormatError(f"{path}: ragged rows")
    arr = np.array(rows)
    y = arr[:, -1].astype(np.int64)
    k = num_classes or int(y.max()) + 1
    return Dataset(arr[:, :-1], y, k)


def batches(dataset, batch_size, rng, epochs=None):
    """Seeded-shuffle minibatches; the last short batch of an epoch is kept.

    Yields datasets indefinitely unless ``epochs`` is given.
    """
    if batch_size <= 0:
        raise InputError("batch size must be positive")
    n = len(dataset)
    if n == 0:
        raise InputError("empty dataset")
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield dataset.subset(order[start:start + batch_size])
        epoch += 1
