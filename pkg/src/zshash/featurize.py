"""Anchor sampling and the anchor-RBF feature map.

An input vector x is lifted to phi(x) with components
``phi_i(x) = exp(-|x - a_i|^2 / delta)`` over m anchors a_i sampled from
the training matrix. The squared distances are accumulated feature-row by
feature-row, so per-column results are bit-identical whether columns are
mapped one at a time, in blocks, or all at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import ValidationError
from .parallel import resolve_workers, run_blocks

if TYPE_CHECKING:
    from .data_io import FeatureMatrix


@dataclass(frozen=True)
class AnchorSet:
    """m anchor columns (d x m), the RBF bandwidth and the sampling seed."""

    anchors: np.ndarray
    delta: float
    rng_seed: int

    def __post_init__(self):
        anchors = np.asarray(self.anchors, dtype=np.float64)
        if anchors.ndim != 2 or anchors.shape[1] < 1:
            raise ValidationError("anchor matrix must be d x m with m >= 1")
        if not np.all(np.isfinite(anchors)):
            raise ValidationError("anchor matrix contains non-finite entries")
        if not (self.delta > 0):
            raise ValidationError(f"bandwidth must be positive, got {self.delta}")
        anchors.setflags(write=False)
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "delta", float(self.delta))
        object.__setattr__(self, "rng_seed", int(self.rng_seed))

    @property
    def m(self) -> int:
        return self.anchors.shape[1]

    @property
    def d(self) -> int:
        return self.anchors.shape[0]


@dataclass(frozen=True)
class KernelizedFeatures:
    """m x n matrix of anchor-RBF features plus the AnchorSet that made it."""

    values: np.ndarray
    anchor_set: AnchorSet

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != self.anchor_set.m:
            raise ValidationError("kernel feature matrix must be m x n")
        if not np.all(np.isfinite(values)):
            raise ValidationError("kernel features contain non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def m(self) -> int:
        return self.values.shape[0]


def default_bandwidth(X: "FeatureMatrix", seed: int, n_pairs: int = 1000) -> float:
    """Bandwidth heuristic: mean squared distance over a random sample of
    item pairs (up to n_pairs, seeded). Falls back to 1.0 when the sample
    contains only duplicate points."""
    values = np.asarray(X.values, dtype=np.float64)
    n = values.shape[1]
    rng = np.random.default_rng(seed)
    ii = rng.integers(0, n, size=n_pairs)
    jj = rng.integers(0, n, size=n_pairs)
    diff = values[:, ii] - values[:, jj]
    d2 = np.einsum("ij,ij->j", diff, diff)
    mean = float(np.mean(d2))
    return mean if mean > 0 else 1.0


def sample_anchors(X: "FeatureMatrix", m: int, seed: int,
                   delta: float | None = None) -> AnchorSet:
    """Sample m distinct training columns as anchors, uniformly without
    replacement under the seeded generator."""
    if m < 1:
        raise ValidationError(f"anchor count must be >= 1, got {m}")
    if m > X.n:
        raise ValidationError(f"cannot sample {m} anchors from {X.n} items")
    rng = np.random.default_rng(seed)
    idx = rng.choice(X.n, size=m, replace=False)
    anchors = np.asarray(X.values, dtype=np.float64)[:, idx].copy()
    if delta is None:
        delta = default_bandwidth(X, seed)
    return AnchorSet(anchors=anchors, delta=delta, rng_seed=seed)


def _kernel_columns(cols: np.ndarray, anchors: np.ndarray, delta: float,
                    out: np.ndarray) -> None:
    """Fill out (m x n) with exp(-|col_j - a_i|^2 / delta).

    Squared distances accumulate row-by-row over the d feature dimensions
    in a fixed order, so a column's result never depends on which other
    columns are in the batch.
    """
    m = anchors.shape[1]
    n = cols.shape[1]
    d2 = np.zeros((m, n), dtype=np.float64)
    buf = np.empty((m, n), dtype=np.float64)
    for r in range(anchors.shape[0]):
        np.subtract(anchors[r, :, None], cols[r, None, :], out=buf)
        np.multiply(buf, buf, out=buf)
        d2 += buf
    np.divide(d2, -delta, out=d2)
    np.exp(d2, out=out)


def kernel_map(x, anchor_set: AnchorSet) -> np.ndarray:
    """Map one d-vector to its m-vector of anchor-RBF features."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != anchor_set.d:
        raise ValidationError(
            f"input has dimension {x.shape}, expected ({anchor_set.d},)")
    if not np.all(np.isfinite(x)):
        raise ValidationError("input vector contains non-finite entries")
    out = np.empty((anchor_set.m, 1), dtype=np.float64)
    _kernel_columns(x[:, None], anchor_set.anchors, anchor_set.delta, out)
    return out[:, 0]


def kernel_map_batch(X, anchor_set: AnchorSet,
                     workers: int | None = 1) -> KernelizedFeatures:
    """Map every column of X; column j equals kernel_map(x_j) exactly."""
    values = np.asarray(getattr(X, "values", X), dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != anchor_set.d:
        raise ValidationError(
            f"feature matrix has {values.shape[0]} rows, expected {anchor_set.d}")
    workers = resolve_workers(workers)
    n = values.shape[1]
    out = np.empty((anchor_set.m, n), dtype=np.float64)

    def fill(start: int, stop: int) -> None:
        _kernel_columns(values[:, start:stop], anchor_set.anchors,
                        anchor_set.delta, out[:, start:stop])

    run_blocks(n, workers, fill)
    return KernelizedFeatures(values=out, anchor_set=anchor_set)
