"""Datasets, IDX ingestion and label-shift client partitioning."""

from __future__ import annotations

import gzip
import re
import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DimensionError,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
    LabelError,
    SceneError,
)
from .nn import MlpModel, forward

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 2:
            raise DimensionError(f"features must be 2-D, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise DimensionError(f"{y.shape[0] if y.ndim else 0} labels for {x.shape[0]} samples")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise LabelError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y.astype(np.int64))

    def __len__(self):
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    sample_indices: np.ndarray
    class_inventory: frozenset

    @property
    def num_samples(self) -> int:
        return len(self.sample_indices)


@dataclass(frozen=True)
class SceneSpec:
    num_clients: int
    classes_per_client: int
    samples_per_class: int
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise SceneError("num_clients must be >= 1")
        if self.classes_per_client < 1:
            raise SceneError("classes_per_client must be >= 1")
        if self.samples_per_class < 1:
            raise SceneError("samples_per_class must be >= 1")


_SCENE_RE = re.compile(r"^(?P<name>[A-Za-z_]*?)(?P<classes>\d+)?-(?P<clients>\d+)-(?P<per_client>\d+)$")


def parse_scene_name(name: str) -> dict:
    """Split a ``Dataset-K-S`` scene label such as ``Cifar10-100-5`` or ``synthetic4-20-2``.

    A trailing number on the dataset part is read as the class count.
    """
    m = _SCENE_RE.match(name.strip())
    if not m:
        raise SceneError(f"scene {name!r} is not of the form <dataset>-<K>-<S>")
    out = {
        "dataset": m["name"],
        "num_clients": int(m["clients"]),
        "classes_per_client": int(m["per_client"]),
    }
    if m["classes"] is not None:
        out["num_classes"] = int(m["classes"])
    return out


def make_gaussian_mixture(
    num_classes: int,
    input_dim: int,
    per_class: int,
    spread: float,
    seed: int,
    center_seed: int | None = None,
) -> LabeledDataset:
    """Isotropic Gaussian blobs around class centers on the unit sphere.

    Centers come from ``center_seed`` (default: ``seed``), so train and test
    splits can share centers while drawing different samples.  Samples are
    ordered by class.
    """
    if num_classes < 1 or input_dim < 1 or per_class < 1:
        raise ValueError("num_classes, input_dim and per_class must be positive")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    crng = np.random.default_rng(seed if center_seed is None else center_seed)
    centers = crng.standard_normal((num_classes, input_dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.standard_normal((num_classes * per_class, input_dim))
    features = centers[labels] + spread * noise
    return LabeledDataset(features, labels, num_classes)


def _open(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(path, blob: bytes, magic: int, ndim: int) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(blob) < 4:
        raise IdxTruncatedError(path, f"file is {len(blob)} bytes, too short for a header")
    (found,) = struct.unpack(">I", blob[:4])
    if found != magic:
        raise IdxMagicError(path, f"magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(blob) < header:
        raise IdxTruncatedError(path, f"header needs {header} bytes, file has {len(blob)}")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(blob) - header
    if payload != expected:
        raise IdxTruncatedError(path, f"dimensions {dims} need {expected} payload bytes, found {payload}")
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims)


def load_idx_pair(images_path, labels_path, num_classes: int | None = None) -> LabeledDataset:
    """Read an IDX image/label file pair (optionally gzipped).

    Pixels are scaled by 1/255 and each image is flattened row-major.
    """
    images = _parse_idx(images_path, _open(images_path), IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(labels_path, _open(labels_path), IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            labels_path, f"{labels.shape[0]} labels for {images.shape[0]} images in {images_path}"
        )
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(features, labels.astype(np.int64), num_classes)


def write_idx_pair(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 ``(n, rows, cols)`` images and ``(n,)`` labels as IDX files."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim != 3:
        raise DimensionError("images must have shape (n, rows, cols)")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.astype(np.uint8).tobytes())


def _assign_classes(num_classes: int, spec: SceneSpec, rng: np.random.Generator) -> list[list[int]]:
    # round-robin over a stream of shuffled class lists; a class already held by
    # the current client is deferred to the next one, which keeps coverage balanced
    pool: deque[int] = deque()
    out = []
    for _ in range(spec.num_clients):
        chosen: list[int] = []
        deferred: list[int] = []
        while len(chosen) < spec.classes_per_client:
            if not pool:
                pool.extend(int(c) for c in rng.permutation(num_classes))
            c = pool.popleft()
            (deferred if c in chosen else chosen).append(c)
        pool.extendleft(reversed(deferred))
        out.append(sorted(chosen))
    return out


def partition_label_shift(dataset: LabeledDataset, spec: SceneSpec) -> list[ClientShard]:
    """Give every client ``S`` classes and ``n`` samples of each.

    Samples of a class are handed out without replacement in client order;
    once a class pool runs dry the remaining requests are drawn with
    replacement from the whole class.
    """
    C = dataset.num_classes
    if spec.classes_per_client > C:
        raise SceneError(f"classes_per_client {spec.classes_per_client} > num_classes {C}")
    rng = np.random.default_rng(spec.seed)
    assignment = _assign_classes(C, spec, rng)

    by_class = [np.flatnonzero(dataset.labels == c) for c in range(C)]
    needed = sorted({c for classes in assignment for c in classes})
    for c in needed:
        if len(by_class[c]) == 0:
            raise SceneError(f"class {c} is assigned to clients but has no samples")
    pools = {c: rng.permutation(by_class[c]) for c in range(C)}
    cursor = dict.fromkeys(range(C), 0)

    n = spec.samples_per_class
    shards = []
    for k, classes in enumerate(assignment):
        parts = []
        for c in classes:
            start = cursor[c]
            fresh = pools[c][start:start + n]
            cursor[c] = start + len(fresh)
            if len(fresh) < n:
                extra = rng.choice(by_class[c], size=n - len(fresh), replace=True)
                fresh = np.concatenate([fresh, extra])
            parts.append(fresh)
        shards.append(ClientShard(k, np.concatenate(parts).astype(np.int64), frozenset(classes)))
    return shards


def shard_class_means(dataset: LabeledDataset, shard: ClientShard, model: MlpModel) -> dict[int, np.ndarray]:
    """Mean raw feature per class present in the shard."""
    feats = forward(model, dataset.features[shard.sample_indices])
    labels = dataset.labels[shard.sample_indices]
    return class_means(feats, labels)


def class_means(features: np.ndarray, labels: np.ndarray) -> dict[int, np.ndarray]:
    return {int(c): features[labels == c].mean(axis=0) for c in np.unique(labels)}
