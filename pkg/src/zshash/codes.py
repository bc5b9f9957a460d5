"""Binary hash codes: encoding, word packing and Hamming distance.

A code of l bits lives in ceil(l/64) little-endian 64-bit words; bit j of
the code is bit (j mod 64) of word (j div 64), +1 maps to 1 and -1 to 0,
and padding bits beyond l are zero so distances can be taken word-wise.

Code database file: magic ``ZSHC``, u32 version=1, u64 n, u32 l, the
packed words (row per item, little-endian), n newline-terminated item ids,
a one-byte label flag, and when the flag is 1 another n newline-terminated
label lines.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data_io import LabelList, _read_exact, _read_id_lines
from .errors import LoadError, ValidationError
from .featurize import kernel_map, kernel_map_batch
from .parallel import resolve_workers, run_blocks

CODE_MAGIC = b"ZSHC"
CODE_VERSION = 1


def _words_per_code(l: int) -> int:
    return (l + 63) // 64


def pack_signs(signs: np.ndarray) -> np.ndarray:
    """Pack rows of {-1,+1} (or boolean) bit vectors into uint64 words."""
    signs = np.asarray(signs)
    bits = (signs > 0).astype(np.uint8) if signs.dtype != np.bool_ else signs.astype(np.uint8)
    squeeze = bits.ndim == 1
    if squeeze:
        bits = bits[None, :]
    n, l = bits.shape
    nw = _words_per_code(l)
    padded = np.zeros((n, nw * 64), dtype=np.uint8)
    padded[:, :l] = bits
    words = np.packbits(padded, axis=1, bitorder="little").view("<u8")
    return words[0] if squeeze else words


def unpack_signs(words: np.ndarray, l: int) -> np.ndarray:
    """Inverse of pack_signs: rows of uint64 words back to {-1,+1} floats."""
    words = np.asarray(words, dtype="<u8")
    squeeze = words.ndim == 1
    if squeeze:
        words = words[None, :]
    bits = np.unpackbits(words.view(np.uint8), axis=1, bitorder="little")[:, :l]
    signs = np.where(bits > 0, 1.0, -1.0)
    return signs[0] if squeeze else signs


@dataclass(frozen=True)
class BinaryCode:
    """One l-bit code in canonical packed form."""

    l: int
    words: np.ndarray

    def __post_init__(self):
        if self.l < 1:
            raise ValidationError(f"code length must be >= 1, got {self.l}")
        words = np.ascontiguousarray(self.words, dtype="<u8")
        if words.shape != (_words_per_code(self.l),):
            raise ValidationError(
                f"expected {_words_per_code(self.l)} words for l={self.l}, got {words.shape}")
        pad = self.l % 64
        if pad and (int(words[-1]) >> pad) != 0:
            raise ValidationError("padding bits beyond l must be zero")
        words.setflags(write=False)
        object.__setattr__(self, "words", words)

    @classmethod
    def from_signs(cls, signs: np.ndarray) -> "BinaryCode":
        signs = np.asarray(signs)
        return cls(l=signs.shape[-1], words=pack_signs(signs))

    def signs(self) -> np.ndarray:
        return unpack_signs(self.words, self.l)


def hamming(a: BinaryCode, b: BinaryCode) -> int:
    """Number of differing bits, via word-wise XOR popcount."""
    if a.l != b.l:
        raise ValidationError(f"code lengths differ: {a.l} vs {b.l}")
    return int(np.bitwise_count(a.words ^ b.words).sum())


@dataclass(frozen=True)
class CodeDatabase:
    """n packed codes with item ids and optional per-item label lines."""

    l: int
    words: np.ndarray
    item_ids: tuple[str, ...]
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.l < 1:
            raise ValidationError(f"code length must be >= 1, got {self.l}")
        words = np.ascontiguousarray(self.words, dtype="<u8")
        nw = _words_per_code(self.l)
        if words.ndim != 2 or words.shape[1] != nw:
            raise ValidationError(f"words must be n x {nw}, got {words.shape}")
        ids = tuple(self.item_ids)
        if len(ids) != words.shape[0]:
            raise ValidationError(f"expected {words.shape[0]} item ids, got {len(ids)}")
        if len(set(ids)) != len(ids):
            raise ValidationError("item ids must be unique")
        pad = self.l % 64
        if pad and words.shape[0] and np.any(words[:, -1] >> pad):
            raise ValidationError("padding bits beyond l must be zero")
        if self.labels is not None:
            labels = tuple(self.labels)
            if len(labels) != len(ids):
                raise ValidationError(
                    f"expected {len(ids)} labels, got {len(labels)}")
            object.__setattr__(self, "labels", labels)
        words.setflags(write=False)
        object.__setattr__(self, "words", words)
        object.__setattr__(self, "item_ids", ids)

    @property
    def n(self) -> int:
        return self.words.shape[0]

    def code(self, i: int) -> BinaryCode:
        return BinaryCode(l=self.l, words=self.words[i].copy())


def hamming_to_all(query: BinaryCode, db: CodeDatabase) -> np.ndarray:
    """Hamming distance from the query to every database code."""
    if query.l != db.l:
        raise ValidationError(f"code lengths differ: {query.l} vs {db.l}")
    xored = np.bitwise_xor(db.words, query.words[None, :])
    return np.bitwise_count(xored).sum(axis=1, dtype=np.int64)


def encode(x, model) -> BinaryCode:
    """Hash one raw feature vector: bit j is [ (P' phi(x))_j >= 0 ]."""
    phi = kernel_map(x, model.anchors)
    pre = model.P.T @ phi[:, None]
    return BinaryCode.from_signs(pre[:, 0] >= 0)


def encode_database(X, model, labels=None, workers: int | None = 1) -> CodeDatabase:
    """Encode every column of X, preserving order.

    labels may be a LabelList, a sequence of label lines, or None (a
    database without labels supports search but not labeled evaluation).
    """
    values = np.asarray(X.values, dtype=np.float64)
    if values.shape[0] != model.anchors.d:
        raise ValidationError(
            f"features have dimension {values.shape[0]}, model expects {model.anchors.d}")
    workers = resolve_workers(workers)
    n = values.shape[1]
    l = model.l
    words = np.empty((n, _words_per_code(l)), dtype="<u8")

    def fill(start: int, stop: int) -> None:
        phi = kernel_map_batch(values[:, start:stop], model.anchors, workers=1)
        pre = model.P.T @ phi.values
        words[start:stop] = pack_signs((pre >= 0).T)

    run_blocks(n, workers, fill)
    if isinstance(labels, LabelList):
        labels = labels.as_lines()
    elif labels is not None:
        labels = tuple(labels)
    return CodeDatabase(l=l, words=words, item_ids=tuple(X.item_ids), labels=labels)


# ---------------------------------------------------------------------------
# Code file format
# ---------------------------------------------------------------------------

def save_code_database(db: CodeDatabase, path) -> None:
    for item_id in db.item_ids:
        if "\n" in item_id:
            raise ValidationError(f"item id {item_id!r} contains a newline")
    if db.labels is not None:
        for lab in db.labels:
            if "\n" in lab:
                raise ValidationError(f"label {lab!r} contains a newline")
    with open(path, "wb") as f:
        f.write(CODE_MAGIC)
        f.write(struct.pack("<I", CODE_VERSION))
        f.write(struct.pack("<QI", db.n, db.l))
        f.write(np.asarray(db.words, dtype="<u8").tobytes(order="C"))
        for item_id in db.item_ids:
            f.write(item_id.encode("utf-8") + b"\n")
        f.write(struct.pack("<B", 1 if db.labels is not None else 0))
        if db.labels is not None:
            for lab in db.labels:
                f.write(lab.encode("utf-8") + b"\n")


def load_code_database(path) -> CodeDatabase:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if len(magic) == 0:
            raise LoadError(f"{path}: empty file")
        if magic != CODE_MAGIC:
            raise LoadError(f"{path}: bad magic {magic!r}, expected {CODE_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CODE_VERSION:
            raise LoadError(f"{path}: unsupported code file version {version}")
        n, l = struct.unpack("<QI", _read_exact(f, 12, "dimensions"))
        if n < 1 or l < 1:
            raise LoadError(f"{path}: empty code database (n={n}, l={l})")
        nw = _words_per_code(l)
        raw = _read_exact(f, 8 * n * nw, "code words")
        words = np.frombuffer(raw, dtype="<u8").reshape(n, nw).copy()
        ids, rest = _read_id_lines(f, n, "item id")
    if len(rest) < 1:
        raise LoadError(f"{path}: truncated file: missing label flag")
    flag = rest[0]
    labels = None
    if flag == 1:
        lines = rest[1:].split(b"\n")
        if len(lines) < n + 1:
            raise LoadError(f"{path}: truncated file: expected {n} label lines")
        labels = tuple(x.decode("utf-8") for x in lines[:n])
    elif flag != 0:
        raise LoadError(f"{path}: invalid label flag {flag}")
    return CodeDatabase(l=l, words=words, item_ids=ids, labels=labels)
