"""Loading and saving of every external data format.

Formats owned by this module:

* feature binary: magic ``ZSHF``, u32 version=1, u64 n, u64 d, then n*d
  little-endian float32 values column-major (item j = column j), then n
  newline-terminated UTF-8 item ids;
* feature CSV: one ``id,v1,...,vd`` line per item;
* labels: one line per item, aligned with the feature file order; in
  multi-label mode a line is a comma-separated tag list;
* embeddings: word2vec text, first line ``vocab_count dim`` then
  ``token v1 ... ve`` per line; every vector is scaled to unit Euclidean
  norm on load;
* split file: ``[seen]`` / ``[unseen]`` section headers, one label per line;
* related pairs: ``labelA<TAB>labelB`` per line;
* model file: magic ``ZSHM``, u32 version=1, u64 dims (m, l, e, d), then
  P, W, R, anchor matrix (row-major), bandwidth and the training
  hyperparameters, all little-endian float64, then u64 max_iters, seed and
  anchor seed.

All loaders are pure functions of file contents and every returned
structure is immutable after construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import LoadError, ProtocolError, ValidationError

FEATURE_MAGIC = b"ZSHF"
MODEL_MAGIC = b"ZSHM"
FORMAT_VERSION = 1


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _read_exact(f, nbytes: int, what: str) -> bytes:
    buf = f.read(nbytes)
    if len(buf) != nbytes:
        raise LoadError(f"truncated file: expected {nbytes} bytes for {what}, "
                        f"got {len(buf)}")
    return buf


def _read_id_lines(f, n: int, what: str):
    """Read n newline-terminated UTF-8 lines; returns (lines, remainder)."""
    rest = f.read()
    lines = rest.split(b"\n")
    if len(lines) < n + 1:
        raise LoadError(f"truncated file: expected {n} {what} lines")
    try:
        out = tuple(x.decode("utf-8") for x in lines[:n])
    except UnicodeDecodeError as exc:
        raise LoadError(f"{what} block is not valid UTF-8: {exc}") from None
    return out, b"\n".join(lines[n:])


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureMatrix:
    """d x n feature matrix; column j is the feature vector of item j."""

    values: np.ndarray
    item_ids: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise ValidationError("feature values must be a 2-d matrix")
        d, n = values.shape
        if n < 1 or d < 1:
            raise ValidationError(f"feature matrix must be non-empty, got d={d}, n={n}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("feature matrix contains non-finite values")
        ids = tuple(self.item_ids)
        if len(ids) != n:
            raise ValidationError(f"expected {n} item ids, got {len(ids)}")
        if len(set(ids)) != len(ids):
            dupes = sorted({x for x in ids if ids.count(x) > 1})
            raise ValidationError(f"duplicate item ids: {dupes[:5]}")
        object.__setattr__(self, "values", _freeze(values))
        object.__setattr__(self, "item_ids", ids)

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def d(self) -> int:
        return self.values.shape[0]

    def select(self, indices: Sequence[int]) -> "FeatureMatrix":
        """New FeatureMatrix restricted to the given item indices, in order."""
        idx = list(indices)
        return FeatureMatrix(self.values[:, idx], tuple(self.item_ids[i] for i in idx))


@dataclass(frozen=True)
class LabelList:
    """Per-item labels. entries[j] is the tag tuple of item j; single-label
    data has exactly one tag per item."""

    entries: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        entries = tuple(tuple(e) for e in self.entries)
        if any(len(e) == 0 for e in entries):
            raise ValidationError("every item must carry at least one label")
        object.__setattr__(self, "entries", entries)

    @property
    def n(self) -> int:
        return len(self.entries)

    @property
    def is_single_label(self) -> bool:
        return all(len(e) == 1 for e in self.entries)

    def single(self) -> tuple[str, ...]:
        """The one label per item; raises for multi-label data."""
        if not self.is_single_label:
            bad = next(i for i, e in enumerate(self.entries) if len(e) != 1)
            raise ValidationError(
                f"item {bad} has {len(self.entries[bad])} labels; "
                "this operation needs single-label data")
        return tuple(e[0] for e in self.entries)

    def select(self, indices: Sequence[int]) -> "LabelList":
        return LabelList(tuple(self.entries[i] for i in indices))

    def as_lines(self) -> tuple[str, ...]:
        """One comma-joined line per item (the on-disk form)."""
        return tuple(",".join(e) for e in self.entries)


@dataclass(frozen=True)
class LabelEmbeddingTable:
    """Map from label string to a unit-norm semantic vector."""

    e: int
    entries: Mapping[str, np.ndarray]

    def __post_init__(self):
        normed = {}
        for token, vec in self.entries.items():
            v = np.asarray(vec, dtype=np.float64)
            if v.shape != (self.e,):
                raise ValidationError(
                    f"embedding for {token!r} has dimension {v.shape}, expected ({self.e},)")
            nrm = np.linalg.norm(v)
            if abs(nrm - 1.0) > 1e-9:
                raise ValidationError(
                    f"embedding for {token!r} has norm {nrm!r}, expected unit norm")
            normed[token] = _freeze(v)
        object.__setattr__(self, "entries", normed)

    def __contains__(self, label: str) -> bool:
        return label in self.entries

    def vector(self, label: str) -> np.ndarray:
        try:
            return self.entries[label]
        except KeyError:
            raise ValidationError(f"label {label!r} missing from embedding table") from None

    def labels(self) -> tuple[str, ...]:
        return tuple(self.entries.keys())


@dataclass(frozen=True)
class SplitSpec:
    """Seen/unseen label sets. Their disjointness is the zero-shot contract."""

    seen_labels: frozenset[str]
    unseen_labels: frozenset[str]

    def __post_init__(self):
        object.__setattr__(self, "seen_labels", frozenset(self.seen_labels))
        object.__setattr__(self, "unseen_labels", frozenset(self.unseen_labels))
        overlap = self.seen_labels & self.unseen_labels
        if overlap:
            raise ProtocolError(
                f"seen and unseen label sets overlap: {sorted(overlap)}")


@dataclass(frozen=True)
class RelatedPairs:
    """Unordered label pairs declared semantically related."""

    pairs: frozenset[frozenset[str]]

    def __post_init__(self):
        canon = set()
        for pair in self.pairs:
            pair = frozenset(pair)
            if len(pair) != 2:
                raise ValidationError(f"related pair must join two distinct labels: {sorted(pair)}")
            canon.add(pair)
        object.__setattr__(self, "pairs", frozenset(canon))

    def related(self, a: str, b: str) -> bool:
        """True when (a, b) is a declared related pair. A label is never
        related to itself."""
        if a == b:
            return False
        return frozenset((a, b)) in self.pairs

    def universe(self) -> frozenset[str]:
        out: set[str] = set()
        for pair in self.pairs:
            out |= pair
        return frozenset(out)


# ---------------------------------------------------------------------------
# Feature matrices
# ---------------------------------------------------------------------------

def load_features(path, format: str = "auto") -> FeatureMatrix:
    """Load a FeatureMatrix from a binary (ZSHF) or CSV file.

    format="auto" sniffs the magic bytes.
    """
    path = Path(path)
    if format == "auto":
        with open(path, "rb") as f:
            head = f.read(4)
        format = "binary" if head == FEATURE_MAGIC else "csv"
    if format == "binary":
        return _load_features_binary(path)
    if format == "csv":
        return _load_features_csv(path)
    raise ValidationError(f"unknown feature format {format!r}")


def _load_features_binary(path: Path) -> FeatureMatrix:
    with open(path, "rb") as f:
        magic = f.read(4)
        if len(magic) == 0:
            raise LoadError(f"{path}: empty file")
        if magic != FEATURE_MAGIC:
            raise LoadError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != FORMAT_VERSION:
            raise LoadError(f"{path}: unsupported feature file version {version}")
        n, d = struct.unpack("<QQ", _read_exact(f, 16, "dimensions"))
        if n < 1 or d < 1:
            raise LoadError(f"{path}: empty feature matrix (n={n}, d={d})")
        raw = _read_exact(f, 4 * n * d, "feature values")
        values = np.frombuffer(raw, dtype="<f4").reshape(d, n, order="F")
        bad = np.argwhere(~np.isfinite(values))
        if bad.size:
            r, c = bad[0]
            raise LoadError(f"{path}: non-finite value for item {c} (feature {r})")
        ids, _ = _read_id_lines(f, n, "item id")
    return FeatureMatrix(values.copy(), ids)


def _load_features_csv(path: Path) -> FeatureMatrix:
    ids: list[str] = []
    columns: list[np.ndarray] = []
    d = None
    with open(path, "r", encoding="utf-8") as f:
        for row_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split(",")
            if len(fields) < 2:
                raise LoadError(f"{path}: row {row_no} has no feature values")
            ids.append(fields[0])
            try:
                vec = np.array([float(x) for x in fields[1:]], dtype=np.float64)
            except ValueError:
                raise LoadError(f"{path}: row {row_no} contains a non-numeric field") from None
            if d is None:
                d = vec.size
            elif vec.size != d:
                raise LoadError(
                    f"{path}: row {row_no} has {vec.size} values, expected {d}")
            if not np.all(np.isfinite(vec)):
                raise LoadError(f"{path}: non-finite value at row {row_no}")
            columns.append(vec)
    if not columns:
        raise LoadError(f"{path}: empty file")
    values = np.stack(columns, axis=1).astype(np.float32)
    return FeatureMatrix(values, tuple(ids))


def save_features(features: FeatureMatrix, path, format: str = "binary") -> None:
    """Write a FeatureMatrix; load_features(save_features(x)) == x exactly."""
    path = Path(path)
    if format == "binary":
        _check_ids(features.item_ids, forbidden="\n")
        with open(path, "wb") as f:
            f.write(FEATURE_MAGIC)
            f.write(struct.pack("<I", FORMAT_VERSION))
            f.write(struct.pack("<QQ", features.n, features.d))
            f.write(np.asarray(features.values, dtype="<f4").tobytes(order="F"))
            for item_id in features.item_ids:
                f.write(item_id.encode("utf-8") + b"\n")
    elif format == "csv":
        _check_ids(features.item_ids, forbidden="\n,")
        with open(path, "w", encoding="utf-8") as f:
            for j, item_id in enumerate(features.item_ids):
                vals = ",".join("%.17g" % float(v) for v in features.values[:, j])
                f.write(f"{item_id},{vals}\n")
    else:
        raise ValidationError(f"unknown feature format {format!r}")


def _check_ids(ids: Iterable[str], forbidden: str) -> None:
    for item_id in ids:
        for ch in forbidden:
            if ch in item_id:
                raise ValidationError(
                    f"item id {item_id!r} contains forbidden character {ch!r}")


# ---------------------------------------------------------------------------
# Labels
# ---------------------------------------------------------------------------

def load_labels(path, multi_label: bool = False) -> LabelList:
    """Load per-item labels, one line per item in feature-file order."""
    path = Path(path)
    entries: list[tuple[str, ...]] = []
    with open(path, "r", encoding="utf-8") as f:
        for row_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                raise LoadError(f"{path}: row {row_no} is empty")
            if multi_label:
                tags = tuple(t for t in line.split(","))
                if any(t == "" for t in tags):
                    raise LoadError(f"{path}: row {row_no} has an empty tag")
                entries.append(tags)
            else:
                entries.append((line,))
    if not entries:
        raise LoadError(f"{path}: empty file")
    return LabelList(tuple(entries))


def save_labels(labels: LabelList, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for line in labels.as_lines():
            f.write(line + "\n")


# ---------------------------------------------------------------------------
# Embedding tables
# ---------------------------------------------------------------------------

def load_embeddings(path) -> LabelEmbeddingTable:
    """Load a word2vec-style text embedding table.

    Every vector is unconditionally rescaled to unit Euclidean norm; this
    preserves all pairwise cosine similarities.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline()
        if not header.strip():
            raise LoadError(f"{path}: empty file")
        parts = header.split()
        if len(parts) != 2:
            raise LoadError(f"{path}: header must be 'vocab_count dim', got {header!r}")
        try:
            count, dim = int(parts[0]), int(parts[1])
        except ValueError:
            raise LoadError(f"{path}: non-integer header fields in {header!r}") from None
        if dim < 1:
            raise LoadError(f"{path}: embedding dimension must be >= 1, got {dim}")
        raw: dict[str, np.ndarray] = {}
        for row_no, line in enumerate(f, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split(" ")
            token = fields[0]
            if token in raw:
                raise LoadError(f"{path}: duplicate token {token!r} at row {row_no}")
            if len(fields) - 1 != dim:
                raise LoadError(
                    f"{path}: row {row_no} ({token!r}) has {len(fields) - 1} values, "
                    f"expected {dim} (ragged dimensions)")
            try:
                vec = np.array([float(x) for x in fields[1:]], dtype=np.float64)
            except ValueError:
                raise LoadError(f"{path}: row {row_no} contains a non-numeric field") from None
            if not np.all(np.isfinite(vec)):
                raise LoadError(f"{path}: non-finite value at row {row_no}")
            nrm = np.linalg.norm(vec)
            if nrm == 0.0:
                raise LoadError(
                    f"{path}: zero vector for token {token!r} at row {row_no} "
                    "(cannot normalize)")
            raw[token] = vec / nrm
    if len(raw) != count:
        raise LoadError(f"{path}: header declares {count} entries, found {len(raw)}")
    return LabelEmbeddingTable(e=dim, entries=raw)


def save_embeddings(table: LabelEmbeddingTable, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{len(table.entries)} {table.e}\n")
        for token, vec in table.entries.items():
            vals = " ".join("%.17g" % v for v in vec)
            f.write(f"{token} {vals}\n")


def assemble_Y(labels, table: LabelEmbeddingTable) -> np.ndarray:
    """Stack label embeddings into the e x n supervision matrix Y.

    Column j is the embedding of item j's label. Accepts a LabelList
    (single-label) or any sequence of label strings.
    """
    if isinstance(labels, LabelList):
        names = labels.single()
    else:
        names = tuple(labels)
    missing = sorted({lab for lab in names if lab not in table})
    if missing:
        raise ValidationError(f"labels missing from embedding table: {missing}")
    Y = np.empty((table.e, len(names)), dtype=np.float64)
    for j, lab in enumerate(names):
        Y[:, j] = table.vector(lab)
    return Y


def cosine_similarity(a, b) -> float:
    """a.b / (|a||b|), in [-1, 1]. For unit vectors this is the dot product."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# Splits and related pairs
# ---------------------------------------------------------------------------

def load_split(path) -> SplitSpec:
    """Load a seen/unseen split file with [seen] and [unseen] sections."""
    path = Path(path)
    sections: dict[str, set[str]] = {"seen": set(), "unseen": set()}
    current = None
    with open(path, "r", encoding="utf-8") as f:
        for row_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            if line == "[seen]":
                current = "seen"
            elif line == "[unseen]":
                current = "unseen"
            elif line.startswith("["):
                raise LoadError(f"{path}: unknown section {line!r} at row {row_no}")
            else:
                if current is None:
                    raise LoadError(
                        f"{path}: label {line!r} at row {row_no} precedes any section header")
                sections[current].add(line)
    return SplitSpec(frozenset(sections["seen"]), frozenset(sections["unseen"]))


def save_split(split: SplitSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("[seen]\n")
        for lab in sorted(split.seen_labels):
            f.write(lab + "\n")
        f.write("[unseen]\n")
        for lab in sorted(split.unseen_labels):
            f.write(lab + "\n")


def check_training_labels(labels, split: SplitSpec) -> None:
    """Enforce the zero-shot contract: every training label is a seen label."""
    if isinstance(labels, LabelList):
        names = labels.single()
    else:
        names = tuple(labels)
    bad = sorted({lab for lab in names if lab not in split.seen_labels})
    if bad:
        raise ProtocolError(
            f"training items carry labels outside the seen set: {bad}")


def load_related_pairs(path) -> RelatedPairs:
    """Load tab-separated related-label pairs."""
    path = Path(path)
    pairs: set[frozenset[str]] = set()
    with open(path, "r", encoding="utf-8") as f:
        for row_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise LoadError(
                    f"{path}: row {row_no} must be 'labelA<TAB>labelB', got {line!r}")
            a, b = fields
            if a == b:
                raise LoadError(
                    f"{path}: row {row_no} relates label {a!r} to itself")
            pairs.add(frozenset((a, b)))
    return RelatedPairs(frozenset(pairs))


def save_related_pairs(related: RelatedPairs, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for pair in sorted(tuple(sorted(p)) for p in related.pairs):
            f.write(f"{pair[0]}\t{pair[1]}\n")


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

def save_model(model, path) -> None:
    """Serialize a trained model. The training code matrix B is not part of
    the file; encoding only needs P, the anchors and the bandwidth."""
    h = model.hyper
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        m, l, e = model.m, model.l, model.e
        d = model.anchors.d
        f.write(struct.pack("<QQQQ", m, l, e, d))
        f.write(np.asarray(model.P, dtype="<f8").tobytes(order="C"))
        f.write(np.asarray(model.W, dtype="<f8").tobytes(order="C"))
        f.write(np.asarray(model.R, dtype="<f8").tobytes(order="C"))
        f.write(np.asarray(model.anchors.anchors, dtype="<f8").tobytes(order="C"))
        f.write(struct.pack("<6d", model.anchors.delta, h.lam, h.alpha,
                            h.beta, h.gamma, h.tol))
        f.write(struct.pack("<QQQ", h.max_iters, h.seed, model.anchors.rng_seed))


def load_model(path):
    """Load a model file; the returned model carries B=None."""
    from .featurize import AnchorSet
    from .train import Hyperparameters, ZshModel

    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if len(magic) == 0:
            raise LoadError(f"{path}: empty file")
        if magic != MODEL_MAGIC:
            raise LoadError(f"{path}: bad magic {magic!r}, expected {MODEL_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != FORMAT_VERSION:
            raise LoadError(f"{path}: unsupported model file version {version}")
        m, l, e, d = struct.unpack("<QQQQ", _read_exact(f, 32, "dimensions"))

        def read_matrix(rows, cols, what):
            raw = _read_exact(f, 8 * rows * cols, what)
            return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()

        P = read_matrix(m, l, "projection P")
        W = read_matrix(l, e, "mapping W")
        R = read_matrix(e, e, "rotation R")
        anchors = read_matrix(d, m, "anchor matrix")
        delta, lam, alpha, beta, gamma, tol = struct.unpack(
            "<6d", _read_exact(f, 48, "bandwidth and hyperparameters"))
        max_iters, seed, anchor_seed = struct.unpack(
            "<QQQ", _read_exact(f, 24, "iteration counts and seeds"))
    anchor_set = AnchorSet(anchors=anchors, delta=delta, rng_seed=anchor_seed)
    hyper = Hyperparameters(l=l, lam=lam, alpha=alpha, beta=beta, gamma=gamma,
                            max_iters=max_iters, tol=tol, seed=seed, m=m)
    ortho = np.max(np.abs(R.T @ R - np.eye(e)))
    if ortho > 1e-8:
        raise LoadError(
            f"{path}: rotation matrix fails orthogonality check (residual {ortho:.3e})")
    return ZshModel(P=P, W=W, R=R, B=None, anchors=anchor_set, hyper=hyper)
