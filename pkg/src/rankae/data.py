"""Synthetic datasets, CSV ingestion and train/val/test splits.

Matrices are flattened column-major: an ``n1 x n2`` matrix ``X`` becomes the
vector ``[X[:, 0], X[:, 1], ...]``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DomainError
from .linalg import qr


class DataFormatError(ValueError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass(frozen=True, eq=False)
class Dataset:
    points: np.ndarray
    labels: np.ndarray | None = None
    split: Split | None = None
    provenance: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2:
            raise DomainError(f"points must be an (N, n) array, got shape {pts.shape}")
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (len(pts),):
                raise DomainError(f"need one label per point, got {labels.shape}")
            object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def subset(self, indices, provenance=None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[indices]
        return Dataset(self.points[indices], labels, None, provenance or self.provenance)

    def part(self, name) -> "Dataset":
        """The ``train``/``val``/``test`` part; the whole set when unsplit."""
        if self.split is None:
            return self
        return self.subset(getattr(self.split, name), f"{self.provenance} [{name}]")


@dataclass(frozen=True)
class StiefelSpec:
    n1: int
    n2: int
    N: int
    delta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.n2 < self.n1:
            raise DomainError(f"need 0 < n2 < n1, got n1={self.n1}, n2={self.n2}")
        if self.N <= 0:
            raise DomainError("N must be positive")
        if self.delta < 0:
            raise DomainError("delta must be non-negative")

    @property
    def ambient_dim(self) -> int:
        return self.n1 * self.n2

    @property
    def manifold_dim(self) -> int:
        return self.n1 * self.n2 - self.n2 * (self.n2 + 1) // 2


def matrix_to_vector(a) -> np.ndarray:
    """Column-major flattening of ``(..., n1, n2)`` into ``(..., n1 * n2)``."""
    a = np.asarray(a)
    return np.swapaxes(a, -1, -2).reshape(a.shape[:-2] + (a.shape[-2] * a.shape[-1],))


def vector_to_matrix(v, n1, n2) -> np.ndarray:
    v = np.asarray(v)
    if v.shape[-1] != n1 * n2:
        raise DomainError(f"vector length {v.shape[-1]} is not {n1}*{n2}")
    return np.swapaxes(v.reshape(v.shape[:-1] + (n2, n1)), -1, -2)


def uniform_stiefel(n1, n2, count, rng) -> np.ndarray:
    """``count`` matrices drawn from the invariant measure on St(n1, n2).

    QR of a standard Gaussian matrix with the signs of ``R``'s diagonal moved
    into ``Q`` (our QR already returns a non-negative diagonal).
    """
    g = rng.standard_normal((count, n1, n2))
    q, _ = qr(g)
    return q


def sample_stiefel(spec: StiefelSpec) -> tuple[Dataset, Dataset]:
    """Clean Stiefel samples and the same samples plus Gaussian noise."""
    rng = np.random.default_rng(spec.seed)
    clean = matrix_to_vector(uniform_stiefel(spec.n1, spec.n2, spec.N, rng))
    noisy = clean + spec.delta * rng.standard_normal(clean.shape) if spec.delta > 0 else clean.copy()
    tag = f"stiefel n1={spec.n1} n2={spec.n2} N={spec.N} delta={spec.delta} seed={spec.seed}"
    return Dataset(clean, provenance=tag + " clean"), Dataset(noisy, provenance=tag + " noisy")


def stiefel_mixture(spec: StiefelSpec, scales=(1.0, 1.0), shifts=(0.0, 1.5)) -> Dataset:
    """Labeled union of noisy copies of St(n1, n2); label = copy index.

    Copy ``c`` holds ``scales[c] * X + shifts[c] * u`` with ``X`` uniform on
    the Stiefel manifold and ``u`` the unit vector along the all-ones
    direction of the flattened space. Points are split evenly between the
    copies and shuffled.
    """
    if len(scales) != len(shifts) or len(scales) < 1:
        raise DomainError("need one shift per scale")
    rng = np.random.default_rng(spec.seed)
    u = np.full(spec.ambient_dim, 1.0 / np.sqrt(spec.ambient_dim))
    counts = np.full(len(scales), spec.N // len(scales))
    counts[: spec.N % len(scales)] += 1
    pts, labels = [], []
    for c, (scale, shift, cnt) in enumerate(zip(scales, shifts, counts)):
        z = scale * matrix_to_vector(uniform_stiefel(spec.n1, spec.n2, int(cnt), rng)) + shift * u
        pts.append(z + spec.delta * rng.standard_normal(z.shape))
        labels.append(np.full(cnt, c))
    pts = np.concatenate(pts)
    labels = np.concatenate(labels)
    order = rng.permutation(len(pts))
    tag = (f"stiefel mixture n1={spec.n1} n2={spec.n2} N={spec.N} delta={spec.delta} "
           f"scales={list(scales)} shifts={list(shifts)} seed={spec.seed}")
    return Dataset(pts[order], labels[order], provenance=tag)


def toy_halfplane(N, seed=0) -> Dataset:
    """Points ``(x, y * [x > 0])`` with ``x, y`` uniform on [-1, 1]."""
    if N <= 0:
        raise DomainError("N must be positive")
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-1.0, 1.0, size=(N, 2))
    xy[:, 1] *= xy[:, 0] > 0
    # -0.0 would print differently from 0
    xy[:, 1] += 0.0
    return Dataset(xy, provenance=f"toy halfplane N={N} seed={seed}")


def make_split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed=0) -> Dataset:
    """Seeded random train/val/test partition of (a prefix of) a shuffle."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or fr.sum() > 1.0 + 1e-12:
        raise DomainError(f"fractions must be three non-negative numbers summing to <= 1, got {fractions}")
    n = len(dataset)
    sizes = [int(round(f * n)) for f in fr]
    while sum(sizes) > n:
        sizes[int(np.argmax(sizes))] -= 1
    perm = np.random.default_rng(seed).permutation(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    split = Split(np.sort(perm[:a]), np.sort(perm[a:b]), np.sort(perm[b:b + sizes[2]]))
    return replace(dataset, split=split)


def save_csv(dataset: Dataset, path, metadata: dict | None = None) -> list[Path]:
    """Write points (and a trailing label column) plus a JSON sidecar."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for i, row in enumerate(dataset.points):
            cells = [format(float(v), ".17g") for v in row]
            if dataset.labels is not None:
                cells.append(str(int(dataset.labels[i])))
            w.writerow(cells)
    side = sidecar_path(path)
    meta = {"rows": len(dataset), "features": dataset.dim,
            "label_column": dataset.dim if dataset.labels is not None else None,
            "provenance": dataset.provenance}
    meta.update(metadata or {})
    side.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return [path, side]


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def load_csv(path, feature_columns=None, label_column=None, header=False) -> Dataset:
    """Read a rectangular numeric CSV; ``#`` starts a comment.

    Columns are zero-based. Without ``feature_columns`` every column except
    the label column is a feature.
    """
    path = Path(path)
    rows, labels, width = [], [], None
    with open(path, newline="") as fh:
        lines = (line.split("#", 1)[0] for line in fh)
        skipped_header = not header
        for lineno, cells in enumerate(csv.reader(lines), 1):
            if not cells or all(not c.strip() for c in cells):
                continue
            if not skipped_header:
                skipped_header = True
                continue
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise DataFormatError(path, lineno, f"expected {width} columns, found {len(cells)}")
            try:
                values = [float(c) for c in cells]
            except ValueError as e:
                raise DataFormatError(path, lineno, f"non-numeric cell ({e})") from None
            rows.append(values)
    if not rows:
        raise DataFormatError(path, 0, "no data rows")
    table = np.array(rows)
    if label_column is not None:
        lab = table[:, label_column]
        if np.any(lab != np.round(lab)):
            raise DomainError("label column must hold integers")
        labels = lab.astype(np.int64)
    if feature_columns is None:
        feature_columns = [c for c in range(width) if c != label_column]
    return Dataset(table[:, feature_columns], labels if label_column is not None else None,
                   provenance=str(path))
