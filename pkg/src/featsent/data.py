"""Image dataset loading.

CIFAR-10, CIFAR-100 and SVHN are read from their standard distribution files
(python pickle batches and ``.mat`` files respectively). ``synthetic`` is a
procedurally generated 10-class, 3x32x32 shape dataset used when the real
datasets are not available on disk.
"""
import os
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATASETS = ("cifar10", "cifar100", "svhn", "synthetic")
NUM_CLASSES = {"cifar10": 10, "cifar100": 100, "svhn": 10, "synthetic": 10}

# full-size split sizes; subsets are rescaled proportionally
FULL_SPLITS = {"train": 49_000, "val": 1_000, "test": 10_000}


@dataclass
class ImageSet:
    images: np.ndarray  # (n, c, h, w) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int
    name: str = ""

    def __len__(self):
        return len(self.labels)

    def take(self, idx):
        return ImageSet(self.images[idx], self.labels[idx], self.num_classes, self.name)

    def fingerprint(self):
        from .utils import hash_arrays

        return hash_arrays(self.images, self.labels)


@dataclass
class Splits:
    train: ImageSet
    val: ImageSet
    test: ImageSet


def default_root():
    return Path(os.environ.get("FEATSENT_DATA", Path.home() / ".cache" / "featsent" / "data"))


def _unpickle(path):
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="bytes")


def _to_float(raw_uint8_nchw):
    return (raw_uint8_nchw.astype(np.float32) / 255.0).astype(np.float32)


def _find_dir(root, candidates):
    root = Path(root)
    for c in candidates:
        if (root / c).is_dir():
            return root / c
    return root


def load_cifar10(root):
    base = _find_dir(root, ["cifar-10-batches-py"])
    if not (base / "data_batch_1").exists():
        raise FileNotFoundError(f"CIFAR-10 batches not found under {root}")
    xs, ys = [], []
    for i in range(1, 6):
        d = _unpickle(base / f"data_batch_{i}")
        xs.append(np.asarray(d[b"data"], dtype=np.uint8))
        ys.append(np.asarray(d[b"labels"], dtype=np.int64))
    t = _unpickle(base / "test_batch")
    train = ImageSet(_to_float(np.concatenate(xs).reshape(-1, 3, 32, 32)), np.concatenate(ys), 10, "cifar10")
    test = ImageSet(
        _to_float(np.asarray(t[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32)),
        np.asarray(t[b"labels"], dtype=np.int64),
        10,
        "cifar10",
    )
    return train, test


def load_cifar100(root):
    base = _find_dir(root, ["cifar-100-python"])
    if not (base / "train").exists():
        raise FileNotFoundError(f"CIFAR-100 files not found under {root}")
    out = []
    for split in ("train", "test"):
        d = _unpickle(base / split)
        out.append(
            ImageSet(
                _to_float(np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32)),
                np.asarray(d[b"fine_labels"], dtype=np.int64),
                100,
                "cifar100",
            )
        )
    return tuple(out)


def load_svhn(root):
    from scipy.io import loadmat

    base = _find_dir(root, ["svhn"])
    out = []
    for split in ("train", "test"):
        path = base / f"{split}_32x32.mat"
        if not path.exists():
            raise FileNotFoundError(f"SVHN file {path} not found")
        m = loadmat(path)
        x = np.transpose(m["X"], (3, 2, 0, 1))  # (32,32,3,n) -> (n,3,32,32)
        y = m["y"].reshape(-1).astype(np.int64)
        y[y == 10] = 0
        out.append(ImageSet(_to_float(np.ascontiguousarray(x)), y, 10, "svhn"))
    return tuple(out)


def _shape_mask(cls, yy, xx, cy, cx, r, rng_angle):
    dy, dx = yy - cy, xx - cx
    # rotate coordinates for the oriented classes
    ca, sa = np.cos(rng_angle), np.sin(rng_angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if cls == 0:  # disk
        return (dx**2 + dy**2) <= r**2
    if cls == 1:  # square
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if cls == 2:  # triangle
        return (v <= 0.7 * r) & (v >= -r + 2.0 * np.abs(u))
    if cls == 3:  # plus
        w = 0.3 * r
        return ((np.abs(u) <= w) & (np.abs(v) <= r)) | ((np.abs(v) <= w) & (np.abs(u) <= r))
    if cls == 4:  # ring
        d2 = dx**2 + dy**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if cls == 5:  # horizontal stripes
        return (np.abs(u) <= r) & (np.abs(v) <= r) & (np.floor((v + r) / (0.5 * r)) % 2 == 0)
    if cls == 6:  # checkerboard
        cell = 0.5 * r
        return (np.abs(u) <= r) & (np.abs(v) <= r) & ((np.floor(u / cell) + np.floor(v / cell)) % 2 == 0)
    if cls == 7:  # X
        w = 0.3 * r
        return (np.abs(u - v) <= w * 1.4) & (np.abs(u + v) <= 2 * r) | (np.abs(u + v) <= w * 1.4) & (
            np.abs(u - v) <= 2 * r
        )
    if cls == 8:  # diamond outline
        s = np.abs(u) + np.abs(v)
        return (s <= r) & (s >= 0.55 * r)
    if cls == 9:  # two blobs
        rr = 0.5 * r
        return ((u - 0.6 * r) ** 2 + v**2 <= rr**2) | ((u + 0.6 * r) ** 2 + v**2 <= rr**2)
    raise ValueError(cls)


def _smooth_noise(rng, size, cells):
    coarse = rng.uniform(-1, 1, (3, cells, cells))
    reps = -(-size // cells)
    fine = np.kron(coarse, np.ones((1, reps, reps)))[:, :size, :size]
    # cheap separable blur to soften the block edges
    for axis in (1, 2):
        fine = 0.5 * fine + 0.25 * (np.roll(fine, 1, axis) + np.roll(fine, -1, axis))
    return fine


def make_synthetic(n, seed, size=32, noise=0.1):
    """Generate ``n`` labelled 3x``size``x``size`` shape images.

    Each image is a textured two-colour background, one class-specific shape
    of random position, scale, orientation, colour and contrast, a clutter
    ellipse, and pixel noise.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n).astype(np.int64)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        c0, c1 = rng.uniform(0.0, 1.0, 3), rng.uniform(0.0, 1.0, 3)
        theta = rng.uniform(0, 2 * np.pi)
        t = (np.cos(theta) * (xx - size / 2) + np.sin(theta) * (yy - size / 2)) / size + 0.5
        t = np.clip(t, 0, 1)
        bg = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
        bg = bg + 0.18 * _smooth_noise(rng, size, int(rng.integers(4, 9)))
        # clutter ellipse
        ey, ex = rng.uniform(0, size, 2)
        ay, ax = rng.uniform(2, 7, 2)
        clutter = ((yy - ey) / ay) ** 2 + ((xx - ex) / ax) ** 2 <= 1
        bg = np.where(clutter[None], rng.uniform(0, 1, 3)[:, None, None], bg)
        r = rng.uniform(0.18, 0.36) * size
        cy, cx = rng.uniform(0.3, 0.7, 2) * size
        mask = _shape_mask(int(labels[i]), yy, xx, cy, cx, r, rng.uniform(-0.6, 0.6))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        fg = bg.mean(axis=(1, 2)) + rng.uniform(0.25, 0.7) * direction
        img = np.where(mask[None], fg[:, None, None], bg)
        img = img + rng.normal(0, noise, img.shape)
        images[i] = np.clip(img, 0, 1)
    return ImageSet(images, labels, 10, "synthetic")


def load_dataset(name, root=None, seed=0, synthetic_size=(50_000, 10_000)):
    """Return the (train, test) sets of ``name`` in canonical order."""
    if name not in DATASETS:
        raise ValueError(f"unknown dataset {name!r}; expected one of {DATASETS}")
    if name == "synthetic":
        return make_synthetic(synthetic_size[0], seed), make_synthetic(synthetic_size[1], seed + 1)
    root = default_root() if root is None else Path(root)
    return {"cifar10": load_cifar10, "cifar100": load_cifar100, "svhn": load_svhn}[name](root)


def split_sizes(subset=None, train_total=50_000, val=None, test=None):
    """Rescale the 49k/1k/10k protocol to a subset of the training file."""
    n = train_total if subset is None else min(subset, train_total)
    frac = n / (FULL_SPLITS["train"] + FULL_SPLITS["val"])
    v = max(1, round(FULL_SPLITS["val"] * frac)) if val is None else val
    te = max(1, round(FULL_SPLITS["test"] * frac)) if test is None else test
    return n - v, v, te


def make_splits(train, test, subset=None, val=None, test_size=None):
    n_train, n_val, n_test = split_sizes(subset, len(train), val, test_size)
    if n_train <= 0:
        raise ValueError("subset too small to hold a training split")
    idx = np.arange(n_train + n_val)
    return Splits(
        train=train.take(idx[:n_train]),
        val=train.take(idx[n_train:]),
        test=test.take(np.arange(min(n_test, len(test)))),
    )


def load_splits(name, root=None, subset=None, seed=0, val=None, test_size=None):
    if name == "synthetic":
        n_train, n_val, n_test = split_sizes(subset, 50_000, val, test_size)
        train, test = load_dataset(name, root, seed, synthetic_size=(n_train + n_val, n_test))
    else:
        train, test = load_dataset(name, root, seed)
    return make_splits(train, test, subset, val, test_size)
