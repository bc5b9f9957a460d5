"""k-nearest-neighbor similarity graph and its Laplacian.

S_ij = exp(-|x_i - x_j|^2 / (2 sigma^2)) whenever i is among the k nearest
neighbors of j or j is among the k nearest neighbors of i, else 0; the
diagonal is zero and distance ties are broken toward the smaller index.
L = D - S with D_ii = sum_j S_ij.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError

AFFINITIES = ("gaussian", "exp-neg-dist")


@dataclass(frozen=True)
class SimilarityGraph:
    """Sparse symmetric affinity matrix with zero diagonal."""

    matrix: sp.csr_matrix
    k: int
    sigma: float

    def __post_init__(self):
        m = self.matrix
        if m.shape[0] != m.shape[1]:
            raise ValidationError("similarity matrix must be square")
        if (m != m.T).nnz != 0:
            raise ValidationError("similarity matrix must be exactly symmetric")
        if np.any(m.diagonal() != 0.0):
            raise ValidationError("similarity matrix must have a zero diagonal")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class LaplacianMatrix:
    """L = D - S, sparse, with the degree vector D_ii kept alongside."""

    matrix: sp.csr_matrix
    degrees: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def build_similarity(X, k: int, sigma: float = 1.0,
                     affinity: str = "gaussian") -> SimilarityGraph:
    """Build the kNN affinity graph by exact brute-force distances.

    affinity="gaussian" uses exp(-d^2 / (2 sigma^2)); "exp-neg-dist" uses
    exp(-d / (2 sigma^2)) with the unsquared distance.
    """
    values = np.asarray(getattr(X, "values", X), dtype=np.float64)
    if values.ndim != 2:
        raise ValidationError("feature input must be a d x n matrix")
    n = values.shape[1]
    if not (1 <= k < n):
        raise ValidationError(f"neighbor count k must satisfy 1 <= k < n, got k={k}, n={n}")
    if not (sigma > 0):
        raise ValidationError(f"sigma must be positive, got {sigma}")
    if affinity not in AFFINITIES:
        raise ValidationError(f"affinity must be one of {AFFINITIES}, got {affinity!r}")

    sq_norms = np.einsum("ij,ij->j", values, values)
    rows = []
    cols = []
    dists = []
    block = 512
    for start in range(0, n, block):
        stop = min(start + block, n)
        chunk = values[:, start:stop]
        d2 = sq_norms[start:stop, None] + sq_norms[None, :] - 2.0 * (chunk.T @ values)
        np.maximum(d2, 0.0, out=d2)
        for i_local in range(stop - start):
            i = start + i_local
            row = d2[i_local].copy()
            row[i] = np.inf
            # stable sort on distance keeps the smaller index first on ties
            nn = np.argsort(row, kind="stable")[:k]
            rows.append(np.full(k, i, dtype=np.int64))
            cols.append(nn.astype(np.int64))
            dists.append(row[nn])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    dists = np.concatenate(dists)

    if affinity == "gaussian":
        vals = np.exp(-dists / (2.0 * sigma * sigma))
    else:
        vals = np.exp(-np.sqrt(dists) / (2.0 * sigma * sigma))

    directed = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    sym = directed.maximum(directed.T)
    sym.eliminate_zeros()
    return SimilarityGraph(matrix=sym, k=k, sigma=float(sigma))


def laplacian(graph: SimilarityGraph) -> LaplacianMatrix:
    """L = D - S with D_ii = sum_j S_ij."""
    S = graph.matrix
    degrees = np.asarray(S.sum(axis=1)).ravel()
    L = sp.diags(degrees, format="csr") - S
    return LaplacianMatrix(matrix=L.tocsr(), degrees=degrees)


def save_similarity_triplets(graph: SimilarityGraph, path) -> None:
    """Debug dump of the upper triangle as 'i j s_ij' lines."""
    coo = graph.matrix.tocoo()
    with open(path, "w", encoding="utf-8") as f:
        order = np.lexsort((coo.col, coo.row))
        for idx in order:
            i, j, v = int(coo.row[idx]), int(coo.col[idx]), float(coo.data[idx])
            if i < j:
                f.write("%d %d %.17g\n" % (i, j, v))
