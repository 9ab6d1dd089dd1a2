"""Datasets and client partitioning.

Binary dataset files hold a header of four little-endian uint32 values
(count, C, H, W) followed, per image, by one label byte and C*H*W pixel
bytes. Pixels are scaled to [0, 1] on load.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray   # (n, C, H, W) float64 in [0, 1]
    labels: np.ndarray   # (n,) int64
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) == 0:
            raise DatasetError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise DatasetError("images and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.images.shape[1:]

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def flat_images(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)


def _prototypes(rng, num_classes, shape, bumps=2):
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    protos = []
    for _ in range(num_classes):
        img = np.zeros(shape)
        for ch in range(c):
            for _ in range(bumps):
                cy, cx = rng.uniform(0, h), rng.uniform(0, w)
                width = rng.uniform(0.15, 0.35) * max(h, w)
                img[ch] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        protos.append(img / img.max())
    return np.array(protos)


def synthetic(num_classes=3, num_images=300, image_shape=(1, 8, 8), seed=0, noise=0.05,
              jitter=0.15) -> Dataset:
    """Gaussian class blobs rendered as small images.

    Each class has a prototype made of smooth bumps; a sample is its class
    prototype with per-image intensity jitter plus pixel noise, clipped to
    [0, 1].
    """
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in image_shape)
    protos = _prototypes(rng, num_classes, shape)
    labels = rng.integers(0, num_classes, size=num_images)
    gain = 1.0 + jitter * rng.uniform(-1, 1, size=(num_images, 1, 1, 1))
    images = protos[labels] * gain + noise * rng.normal(size=(num_images, *shape))
    return Dataset(np.clip(images, 0.0, 1.0), labels, num_classes)


def separable(num_images=400, image_shape=(1, 8, 8), seed=0, margin=0.3) -> Dataset:
    """Two classes split by a random hyperplane with a guaranteed margin."""
    rng = np.random.default_rng(seed)
    d = int(np.prod(image_shape))
    direction = rng.normal(size=d)
    direction /= np.linalg.norm(direction)
    x = rng.uniform(0, 1, size=(4 * num_images, d))
    score = (x - 0.5) @ direction
    keep = np.abs(score) > margin / 2
    x, score = x[keep][:num_images], score[keep][:num_images]
    if len(x) < num_images:
        raise DatasetError("margin too large for the requested size")
    return Dataset(x.reshape(num_images, *image_shape), (score > 0).astype(np.int64), 2)


def write_binary(dataset: Dataset, path) -> None:
    c, h, w = dataset.image_shape
    header = struct.pack("<4I", len(dataset), c, h, w)
    body = bytearray()
    pixels = np.round(np.clip(dataset.images, 0, 1) * 255).astype(np.uint8)
    for label, img in zip(dataset.labels, pixels):
        body.append(int(label))
        body.extend(img.tobytes())
    Path(path).write_bytes(header + bytes(body))


def read_binary(path, num_classes=None) -> Dataset:
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise DatasetError(f"{path}: truncated header at byte {len(blob)}")
    count, c, h, w = struct.unpack_from("<4I", blob, 0)
    if count == 0:
        raise DatasetError(f"{path}: image count is 0 (byte offset 0)")
    if min(c, h, w) == 0:
        raise DatasetError(f"{path}: zero image dimension in header (byte offset 4)")
    record = 1 + c * h * w
    expected = 16 + count * record
    if len(blob) != expected:
        offset = min(len(blob), expected)
        raise DatasetError(
            f"{path}: expected {expected} bytes for {count} images, found {len(blob)} "
            f"(malformed at byte offset {offset})"
        )
    raw = np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(count, record)
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(count, c, h, w) / 255.0
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(images, labels, k)


def load_dataset(spec: dict, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Build (train, test) from a dataset spec dict (see :mod:`flrsp.config`)."""
    kind = spec.get("kind", "synthetic")
    if kind == "synthetic":
        n_train, n_test = int(spec.get("num_train", 300)), int(spec.get("num_test", 150))
        generator = spec.get("generator", "blobs")
        if generator == "separable":
            full = separable(n_train + n_test, spec.get("image_shape", (1, 8, 8)), seed,
                             margin=spec.get("margin", 0.3))
        else:
            full = synthetic(spec.get("num_classes", 3), n_train + n_test,
                             spec.get("image_shape", (1, 8, 8)), seed, spec.get("noise", 0.05))
        return full.subset(np.arange(n_train)), full.subset(np.arange(n_train, n_train + n_test))
    if kind == "file":
        k = spec.get("num_classes")
        return read_binary(spec["train"], k), read_binary(spec["test"], k)
    raise DatasetError(f"unknown dataset kind {kind!r}")


def partition(dataset: Dataset, num_clients: int, scheme="iid", seed=0, alpha=0.1,
              min_size=1, max_tries=1000) -> list[np.ndarray]:
    """Split sample indices into disjoint, exhaustive client shards.

    ``iid`` shuffles and deals equal-size shards. ``dirichlet`` draws, for
    every class, client proportions from Dirichlet(alpha, ..., alpha) and
    redraws until each client holds at least ``min_size`` samples.
    """
    n = len(dataset)
    if num_clients < 1:
        raise ValueError("need at least one client")
    if num_clients > n:
        raise ValueError(f"{num_clients} clients exceed dataset size {n}")
    rng = np.random.default_rng(seed)
    if scheme == "iid":
        return [np.sort(s) for s in np.array_split(rng.permutation(n), num_clients)]
    if scheme != "dirichlet":
        raise ValueError(f"unknown partition scheme {scheme!r}")
    labels = dataset.labels
    for _ in range(max_tries):
        shards = [[] for _ in range(num_clients)]
        for k in range(dataset.num_classes):
            idx = rng.permutation(np.flatnonzero(labels == k))
            props = rng.dirichlet(np.full(num_clients, float(alpha)))
            cuts = (np.cumsum(props) * len(idx)).astype(int)[:-1]
            for client, part in enumerate(np.split(idx, cuts)):
                shards[client].extend(part.tolist())
        if min(len(s) for s in shards) >= min_size:
            return [np.sort(np.array(s, dtype=np.int64)) for s in shards]
    raise ValueError(f"could not draw a Dirichlet partition with min_size={min_size}")
