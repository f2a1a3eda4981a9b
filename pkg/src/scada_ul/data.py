"""Synthetic two-domain datasets with controllable shift and forget splits.

Source and target domains are Gaussian class clusters; the target is the
source distribution pushed through an invertible affine map plus noise.
Datasets are immutable after construction, and the target *adaptation* view
never carries labels (labels live only in evaluation views).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SOURCE = "source"
TARGET = "target"


@dataclass(frozen=True)
class AffineShift:
    """Invertible affine transform x -> matrix @ x + offset (+ Gaussian noise)."""

    matrix: np.ndarray
    offset: np.ndarray
    noise_std: float = 0.0

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        o = np.asarray(self.offset, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"shift matrix must be square, got {m.shape}")
        if o.shape != (m.shape[0],):
            raise ValueError("offset dimension does not match matrix")
        if abs(np.linalg.det(m)) < 1e-9:
            raise ValueError("degenerate (singular) shift matrix")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "offset", o)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @staticmethod
    def identity(dim: int, noise_std: float = 0.0) -> "AffineShift":
        return AffineShift(np.eye(dim), np.zeros(dim), noise_std)

    @staticmethod
    def rotation(
        angle_deg: float,
        dim: int = 2,
        translation: Sequence[float] | None = None,
        scale: float = 1.0,
        noise_std: float = 0.0,
    ) -> "AffineShift":
        """Plane rotation in the first two coordinates, optional uniform scale."""
        if dim < 2:
            raise ValueError("rotation needs dim >= 2")
        theta = math.radians(angle_deg)
        m = np.eye(dim)
        m[0, 0] = m[1, 1] = math.cos(theta)
        m[0, 1] = -math.sin(theta)
        m[1, 0] = math.sin(theta)
        m = scale * m
        off = np.zeros(dim) if translation is None else np.asarray(translation, dtype=np.float64)
        return AffineShift(m, off, noise_std)

    def apply(self, x: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        out = x @ self.matrix.T + self.offset
        if self.noise_std > 0:
            if rng is None:
                raise ValueError("noise_std > 0 requires an rng")
            out = out + rng.normal(0.0, self.noise_std, size=out.shape)
        return out


@dataclass(frozen=True)
class DomainDataset:
    """Feature vectors with optional labels and a domain tag.

    ``labels is None`` marks an adaptation (label-free) view. Arrays are
    write-protected so shared views stay safe under concurrent reads.
    """

    inputs: np.ndarray
    labels: np.ndarray | None
    domain: str

    def __post_init__(self):
        x = np.ascontiguousarray(np.asarray(self.inputs, dtype=np.float32))
        x.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        if self.labels is not None:
            y = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
            if y.shape != (x.shape[0],):
                raise ValueError("labels length does not match inputs")
            y.setflags(write=False)
            object.__setattr__(self, "labels", y)
        if self.domain not in (SOURCE, TARGET):
            raise ValueError(f"unknown domain tag {self.domain!r}")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def class_set(self) -> frozenset[int]:
        if self.labels is None or len(self) == 0:
            return frozenset()
        return frozenset(int(c) for c in np.unique(self.labels))

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    def strip_labels(self) -> "DomainDataset":
        """Adaptation view: inputs only."""
        return DomainDataset(self.inputs, None, self.domain)

    def subset(self, indices: np.ndarray | Sequence[int]) -> "DomainDataset":
        idx = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return DomainDataset(self.inputs[idx], labels, self.domain)

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("this view is label-free; use an evaluation view")
        return self.labels

    def require_label_free(self, what: str = "operation") -> None:
        if self.labels is not None:
            raise ValueError(f"{what} requires a label-free view; call strip_labels() first")


@dataclass(frozen=True)
class SplitSpec:
    """Forget-class selection plus the train fraction used downstream."""

    forget_classes: tuple[int, ...]
    train_fraction: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "forget_classes", tuple(int(c) for c in self.forget_classes))
        if len(set(self.forget_classes)) != len(self.forget_classes):
            raise ValueError("forget_classes contains duplicates")
        if not (0.0 < self.train_fraction < 1.0):
            raise ValueError("train_fraction must be in (0, 1)")


def _draw_separated_means(
    num: int, dim: int, min_separation: float, rng: np.random.Generator
) -> np.ndarray:
    box = max(min_separation, min_separation * num ** (1.0 / dim))
    means: list[np.ndarray] = []
    while len(means) < num:
        accepted = False
        for _ in range(200):
            cand = rng.uniform(-box, box, size=dim)
            if all(np.linalg.norm(cand - m) >= min_separation for m in means):
                means.append(cand)
                accepted = True
                break
        if not accepted:
            box *= 1.3  # widen and retry; terminates for any num, dim
    return np.stack(means)


def make_synthetic_domains(
    num_classes: int,
    dim: int,
    shift: AffineShift,
    samples_per_class: int,
    seed: int,
    cluster_std: float = 0.6,
    min_separation: float = 4.0,
) -> tuple[DomainDataset, DomainDataset]:
    """Gaussian class clusters and their affine-shifted target counterpart.

    Both domains draw fresh samples from the same class clusters; target
    samples are then pushed through ``shift``. A pure function of its
    arguments: a fixed seed reproduces both datasets bit for bit.
    """
    if num_classes < 4:
        raise ValueError("num_classes must be >= 4 to support multi-class forgetting")
    if shift.dim != dim:
        raise ValueError("shift dimension does not match dim")
    if samples_per_class < 1:
        raise ValueError("samples_per_class must be positive")
    rng = np.random.default_rng(seed)
    means = _draw_separated_means(num_classes, dim, min_separation, rng)

    def draw(domain: str) -> DomainDataset:
        xs, ys = [], []
        for c in range(num_classes):
            pts = means[c] + cluster_std * rng.normal(size=(samples_per_class, dim))
            if domain == TARGET:
                pts = shift.apply(pts, rng)
            xs.append(pts)
            ys.append(np.full(samples_per_class, c, dtype=np.int64))
        return DomainDataset(np.concatenate(xs), np.concatenate(ys), domain)

    source = draw(SOURCE)
    target = draw(TARGET)
    return source, target


def split_retain_forget(
    ds: DomainDataset, spec: SplitSpec
) -> tuple[DomainDataset, DomainDataset]:
    """Partition a labeled dataset by class into (retain, forget)."""
    labels = ds.require_labels()
    forget = set(spec.forget_classes)
    if ds.class_set and forget >= ds.class_set:
        raise ValueError("cannot forget every class present")
    mask = np.isin(labels, list(forget)) if forget else np.zeros(len(ds), dtype=bool)
    return ds.subset(np.flatnonzero(~mask)), ds.subset(np.flatnonzero(mask))


def train_test_split(
    ds: DomainDataset, fraction: float, seed: int
) -> tuple[DomainDataset, DomainDataset]:
    """Stratified per-class split, deterministic under seed."""
    if not (0.0 < fraction < 1.0):
        raise ValueError("fraction must be in (0, 1)")
    labels = ds.require_labels()
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in sorted(ds.class_set):
        idx = np.flatnonzero(labels == c)
        if idx.size < 2:
            raise ValueError(f"class {c} has fewer than 2 samples; cannot stratify")
        perm = rng.permutation(idx)
        n_train = int(round(fraction * idx.size))
        n_train = min(max(n_train, 1), idx.size - 1)
        train_idx.append(perm[:n_train])
        test_idx.append(perm[n_train:])
    return ds.subset(np.concatenate(train_idx)), ds.subset(np.concatenate(test_idx))


def sample_ood_classes(
    num_ood: int,
    dim: int,
    seed: int,
    avoid_centers: np.ndarray | None = None,
    cluster_std: float = 0.6,
    min_sigma: float = 5.0,
    samples_per_class: int = 100,
) -> DomainDataset:
    """Out-of-distribution Gaussian clusters with sentinel labels -1, -2, ...

    Cluster centers keep a distance of at least ``min_sigma * cluster_std``
    from every center in ``avoid_centers`` (and from each other).
    """
    rng = np.random.default_rng(seed)
    if num_ood == 0:
        return DomainDataset(np.zeros((0, dim), dtype=np.float32), np.zeros(0, dtype=np.int64), TARGET)
    gap = min_sigma * cluster_std
    avoid = [] if avoid_centers is None else [np.asarray(c, dtype=np.float64) for c in avoid_centers]
    box = max(gap, 6.0)
    centers: list[np.ndarray] = []
    while len(centers) < num_ood:
        placed = False
        for _ in range(500):
            cand = rng.uniform(-box, box, size=dim)
            if all(np.linalg.norm(cand - m) >= gap for m in avoid + centers):
                centers.append(cand)
                placed = True
                break
        if not placed:
            box *= 1.5
    xs, ys = [], []
    for i, center in enumerate(centers):
        xs.append(center + cluster_std * rng.normal(size=(samples_per_class, dim)))
        ys.append(np.full(samples_per_class, -(i + 1), dtype=np.int64))
    return DomainDataset(np.concatenate(xs), np.concatenate(ys), TARGET)


def dataset_to_csv(ds: DomainDataset, path: str | Path) -> None:
    """Write feature_0..feature_{d-1},label,domain rows; label blank if unlabeled."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"feature_{i}" for i in range(ds.dim)] + ["label", "domain"])
        labels: Iterable = ds.labels if ds.labels is not None else [""] * len(ds)
        for row, lab in zip(ds.inputs, labels):
            writer.writerow([repr(float(v)) for v in row] + [lab, ds.domain])


def dataset_from_csv(path: str | Path) -> DomainDataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or not header[0].startswith("feature_"):
            raise ValueError("missing or malformed header row")
        n_feat = len(header) - 2
        rows, labels, domains = [], [], []
        for rec in reader:
            rows.append([float(v) for v in rec[:n_feat]])
            labels.append(rec[n_feat])
            domains.append(rec[n_feat + 1])
    if not rows:
        raise ValueError("empty dataset file")
    domain = domains[0]
    if any(d != domain for d in domains):
        raise ValueError("mixed domain tags in one file")
    has_labels = any(lab != "" for lab in labels)
    y = np.array([int(lab) for lab in labels], dtype=np.int64) if has_labels else None
    return DomainDataset(np.array(rows, dtype=np.float32), y, domain)
