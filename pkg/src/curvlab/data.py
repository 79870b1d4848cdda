"""Desk-scale datasets.

Every loader returns inputs inside the box [0, 1]^d, rescaled so that the
largest input has unit Euclidean norm.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linalg import SeededRng
from .nn import SampleBatch

KINDS = ("gaussians", "moons", "spirals", "csv", "idx")
DATA_MODULE_ID = 1


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "gaussians"
    n: int = 1000
    classes: int = 3
    dim: int = 2
    noise: float = 0.05
    seed: int = 0
    path: str | None = None
    label_path: str | None = None
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.n < 0 or self.classes < 1 or self.dim < 1:
            raise ValueError("n must be >= 0, classes and dim >= 1")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must be in (0, 1)")


def unit_ball_normalize(x: np.ndarray) -> np.ndarray:
    """Scale all rows by one factor so that the largest row norm is exactly 1."""
    norms = np.linalg.norm(x, axis=1)
    top = float(np.max(norms)) if norms.size else 0.0
    if top == 0.0:
        return x.copy()
    out = x / top
    # Division can leave the maximum a rounding error above one.
    worst = np.argmax(np.linalg.norm(out, axis=1))
    out[worst] /= max(1.0, float(np.linalg.norm(out[worst])))
    return out


def _to_box(x: np.ndarray, lo: float = 0.05, hi: float = 0.95) -> np.ndarray:
    mn = x.min(axis=0)
    span = np.where(x.max(axis=0) > mn, x.max(axis=0) - mn, 1.0)
    return lo + (hi - lo) * (x - mn) / span


def _balanced_labels(n: int, k: int) -> np.ndarray:
    return np.arange(n) % k


def _gaussians(spec: DatasetSpec, gen: np.random.Generator):
    # Means are spread over angles in the positive quadrant so that classes
    # separate by direction; bias-free ReLU nets are positively homogeneous.
    y = _balanced_labels(spec.n, spec.classes)
    angles = (np.arange(spec.classes) + 0.5) / spec.classes * (np.pi / 2)
    means = np.full((spec.classes, spec.dim), 0.3)
    means[:, 0] = np.cos(angles)
    if spec.dim > 1:
        means[:, 1] = np.sin(angles)
    means *= 0.7
    x = means[y] + spec.noise * gen.standard_normal((spec.n, spec.dim))
    return np.clip(x, 0.0, 1.0), y


def _moons(spec: DatasetSpec, gen: np.random.Generator):
    if spec.classes != 2:
        raise ValueError("moons has exactly 2 classes")
    y = _balanced_labels(spec.n, 2)
    t = gen.uniform(0, np.pi, size=spec.n)
    x = np.where(y[:, None] == 0, np.stack([np.cos(t), np.sin(t)], 1), np.stack([1 - np.cos(t), 0.5 - np.sin(t)], 1))
    x = x + spec.noise * gen.standard_normal(x.shape)
    if spec.dim > 2:
        x = np.hstack([x, 0.5 + spec.noise * gen.standard_normal((spec.n, spec.dim - 2))])
    return _to_box(x[:, : spec.dim]), y


def _spirals(spec: DatasetSpec, gen: np.random.Generator):
    y = _balanced_labels(spec.n, spec.classes)
    t = gen.uniform(0.1, 1.0, size=spec.n)
    theta = 2.5 * np.pi * t + 2 * np.pi * y / spec.classes
    x = np.stack([t * np.cos(theta), t * np.sin(theta)], 1)
    x = x + spec.noise * gen.standard_normal(x.shape)
    if spec.dim > 2:
        x = np.hstack([x, 0.5 + spec.noise * gen.standard_normal((spec.n, spec.dim - 2))])
    return _to_box(x[:, : spec.dim]), y


def load_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Rows of ``feature..., label``; a non-numeric first row is treated as a header."""
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if i == 0:
                    continue
                raise
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature column and a label column")
    x = arr[:, :-1]
    y = arr[:, -1].astype(np.int64)
    mn, mx = x.min(axis=0), x.max(axis=0)
    if np.any(mn < 0) or np.any(mx > 1):
        x = _to_box(x, 0.0, 1.0)
    return x, y


def _read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != 0x08:
        raise ValueError(f"{path}: unsupported IDX magic {raw[:4].hex()}")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: expected {int(np.prod(dims))} values, found {data.size}")
    return data.reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """MNIST-style IDX pair (magic 0x00000803 images, 0x00000801 labels)."""
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if images.ndim < 2 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise ValueError("IDX image/label files disagree in shape")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return x, labels.astype(np.int64)


def stratified_split(y: np.ndarray, test_fraction: float, rng: SeededRng):
    gen = rng.generator()
    train, test = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[gen.permutation(idx.size)]
        n_test = int(round(test_fraction * idx.size))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def gen_synthetic(spec: DatasetSpec) -> tuple[SampleBatch, SampleBatch]:
    """Generate or load a dataset and return a stratified (train, test) split."""
    root = SeededRng(spec.seed)
    if spec.kind == "csv":
        if not spec.path:
            raise ValueError("csv dataset needs a path")
        x, y = load_csv(spec.path)
    elif spec.kind == "idx":
        if not (spec.path and spec.label_path):
            raise ValueError("idx dataset needs image and label paths")
        x, y = load_idx(spec.path, spec.label_path)
    else:
        if spec.n == 0:
            raise ValueError("empty batch: n must be positive")
        gen = root.derive(DATA_MODULE_ID, 0).generator()
        x, y = {"gaussians": _gaussians, "moons": _moons, "spirals": _spirals}[spec.kind](spec, gen)
    if x.shape[0] == 0:
        raise ValueError("empty batch: dataset has no samples")
    x = unit_ball_normalize(x)
    tr, te = stratified_split(y, spec.test_fraction, root.derive(DATA_MODULE_ID, 1))
    return SampleBatch(x[tr], y[tr]), SampleBatch(x[te], y[te])
