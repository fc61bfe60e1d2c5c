"""Relative-index CSC encoding with PE row interleaving and zero padding.

Each PE owns rows ``pe, pe + n_pe, ...``. Its stream is stored column by
column as 16-bit words::

    bits 15..4  weight payload (12-bit two's complement)
    bits  3..0  rows skipped since the previous word of this column

The first word of a column counts skipped rows from local row 0. A gap of
16 or more rows cannot be expressed in four bits, so padding words with a
zero payload and an index of 15 are inserted; each one advances the row
cursor by 16.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import IO

import numpy as np

from .compress import PruneMask
from .container import read_container, write_container
from .errors import CorruptionError, ShapeError, ValidationError
from .quantize import FixedFormat, QuantizedTensor

INDEX_BITS = 4
PAYLOAD_BITS = 12
MAX_GAP = (1 << INDEX_BITS) - 1
PAD_WORD = MAX_GAP  # payload 0, index 15


@dataclass
class PadStats:
    real_nnz: int
    padding_words: int
    dense_size: int

    @property
    def overhead(self) -> float:
        """Extra density from padding: padding words per dense matrix element."""
        return self.padding_words / self.dense_size if self.dense_size else 0.0

    @property
    def relative_overhead(self) -> float:
        """Padding words per real nonzero."""
        return self.padding_words / self.real_nnz if self.real_nnz else 0.0

    @property
    def total_words(self) -> int:
        return self.real_nnz + self.padding_words


@dataclass
class EncodedSparseMatrix:
    rows: int
    cols: int
    n_pe: int
    col_ptr: np.ndarray  # (n_pe, cols + 1) int64, offsets into each PE's words
    words: list[np.ndarray]  # per PE, uint16
    real_counts: np.ndarray  # (n_pe, cols) real (non-padding) words per column
    format: FixedFormat

    def local_rows(self, pe: int) -> int:
        return len(range(pe, self.rows, self.n_pe))

    def word_counts(self) -> np.ndarray:
        """(n_pe, cols) words per PE per column, padding included."""
        return np.diff(self.col_ptr, axis=1)

    @property
    def total_words(self) -> int:
        return int(sum(len(w) for w in self.words))

    @property
    def real_nnz(self) -> int:
        return int(self.real_counts.sum())

    def pad_stats(self) -> PadStats:
        return PadStats(self.real_nnz, self.total_words - self.real_nnz, self.rows * self.cols)


def _mask_array(mask) -> np.ndarray:
    return mask.kept if isinstance(mask, PruneMask) else np.asarray(mask, dtype=bool)


def pack_words(payload: np.ndarray, index: np.ndarray) -> np.ndarray:
    return (((payload.astype(np.int64) & 0xFFF) << INDEX_BITS) | index).astype(np.uint16)


def unpack_words(words: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w = words.astype(np.int64)
    payload = w >> INDEX_BITS
    payload = np.where(payload >= 1 << (PAYLOAD_BITS - 1), payload - (1 << PAYLOAD_BITS), payload)
    return payload, w & MAX_GAP


def encode_csc(q: QuantizedTensor, mask, n_pe: int) -> tuple[EncodedSparseMatrix, PadStats]:
    values = np.asarray(q.values, dtype=np.int64)
    kept = _mask_array(mask)
    if values.ndim != 2 or kept.shape != values.shape:
        raise ShapeError(f"tensor {values.shape} and mask {kept.shape} must be equal 2-D shapes")
    rows, cols = values.shape
    if n_pe < 1 or n_pe > rows:
        raise ValidationError(f"n_pe must lie in [1, {rows}], got {n_pe}")
    lo, hi = -(1 << (PAYLOAD_BITS - 1)), (1 << (PAYLOAD_BITS - 1)) - 1
    kv = values[kept]
    if kv.size and (kv.min() < lo or kv.max() > hi):
        raise ValidationError(f"weight payload overflow: values must fit {PAYLOAD_BITS} bits")

    r, c = np.nonzero(kept)
    pe, local = r % n_pe, r // n_pe
    order = np.lexsort((local, c, pe))
    pe, c, local, val = pe[order], c[order], local[order], values[r[order], c[order]]

    # gap to the previous entry of the same (pe, column) run
    new_run = np.ones(len(pe), dtype=bool)
    new_run[1:] = (pe[1:] != pe[:-1]) | (c[1:] != c[:-1])
    prev = np.empty_like(local)
    prev[0:1] = -1
    prev[1:] = local[:-1]
    prev[new_run] = -1
    gap = local - prev - 1
    n_pad = gap // (MAX_GAP + 1)
    residual = gap - n_pad * (MAX_GAP + 1)
    span = n_pad + 1

    col_ptr = np.zeros((n_pe, cols + 1), dtype=np.int64)
    real_counts = np.zeros((n_pe, cols), dtype=np.int64)
    words: list[np.ndarray] = []
    bounds = np.searchsorted(pe, np.arange(n_pe + 1))
    for p in range(n_pe):
        a, b = bounds[p], bounds[p + 1]
        sp = span[a:b]
        stream = np.full(int(sp.sum()), PAD_WORD, dtype=np.uint16)
        stream[np.cumsum(sp) - 1] = pack_words(val[a:b], residual[a:b])
        words.append(stream)
        col_ptr[p, 1:] = np.cumsum(np.bincount(c[a:b], weights=sp, minlength=cols)).astype(np.int64)
        real_counts[p] = np.bincount(c[a:b], minlength=cols)

    enc = EncodedSparseMatrix(rows, cols, n_pe, col_ptr, words, real_counts, q.format)
    return enc, enc.pad_stats()


def decode_csc(e: EncodedSparseMatrix) -> QuantizedTensor:
    """Rebuild the dense (masked) integer tensor by accumulating relative indices."""
    col_ptr = np.asarray(e.col_ptr, dtype=np.int64)
    if col_ptr.shape != (e.n_pe, e.cols + 1):
        raise CorruptionError(f"col_ptr shape {col_ptr.shape} != {(e.n_pe, e.cols + 1)}")
    if len(e.words) != e.n_pe:
        raise CorruptionError(f"{len(e.words)} word streams for {e.n_pe} PEs")
    out = np.zeros((e.rows, e.cols), dtype=np.int64)
    for p in range(e.n_pe):
        ptr, words = col_ptr[p], np.asarray(e.words[p])
        if ptr[0] != 0 or np.any(np.diff(ptr) < 0):
            raise CorruptionError(f"PE {p}: column pointers are not monotone from 0")
        if ptr[-1] != len(words):
            raise CorruptionError(f"PE {p}: last column pointer {ptr[-1]} != {len(words)} words")
        if not len(words):
            continue
        payload, index = unpack_words(words)
        col = np.repeat(np.arange(e.cols), np.diff(ptr))
        steps = index + 1
        csum = np.cumsum(steps)
        start = np.concatenate(([0], csum))[ptr[:-1]]
        pos = csum - np.repeat(start, np.diff(ptr)) - 1
        n_local = e.local_rows(p)
        if np.any(pos >= n_local):
            bad = int(col[np.argmax(pos >= n_local)])
            raise CorruptionError(
                f"PE {p}, column {bad}: accumulated index exceeds {n_local} local rows"
            )
        out[pos * e.n_pe + p, col] = payload
    return QuantizedTensor(out, e.format)


def compressed_size_bytes(e: EncodedSparseMatrix) -> int:
    """Weight storage in bytes, padding included, pointers excluded."""
    return 2 * e.total_words


def pointer_size_bytes(e: EncodedSparseMatrix, ptr_bytes: int = 4) -> int:
    return ptr_bytes * int(e.col_ptr.size)


def dump_columns(e: EncodedSparseMatrix, out: IO[str], max_cols: int | None = None) -> None:
    """Human-readable per-PE column listing: ``(weight, index)`` pairs, padding starred."""
    ncols = e.cols if max_cols is None else min(max_cols, e.cols)
    for p in range(e.n_pe):
        payload, index = unpack_words(np.asarray(e.words[p]))
        out.write(f"PE{p} ({e.local_rows(p)} local rows, {len(e.words[p])} words)\n")
        for j in range(ncols):
            a, b = e.col_ptr[p, j], e.col_ptr[p, j + 1]
            cells = []
            for k in range(a, b):
                pad = payload[k] == 0 and index[k] == MAX_GAP
                cells.append(f"({payload[k]},{index[k]}){'*' if pad else ''}")
            out.write(f"  col {j:4d} ptr {a:6d}: {' '.join(cells) if cells else '-'}\n")


def encoded_tensors(name: str, e: EncodedSparseMatrix) -> dict[str, np.ndarray]:
    t = {f"{name}/col_ptr": e.col_ptr.astype(np.int32), f"{name}/real_counts": e.real_counts.astype(np.int32)}
    for p, w in enumerate(e.words):
        t[f"{name}/pe{p:03d}"] = np.asarray(w, dtype=np.uint16)
    return t


def save_encoded(matrices: dict[str, EncodedSparseMatrix], path: str | Path,
                 extra_meta: dict | None = None) -> Path:
    meta = {
        "kind": "encoded-model",
        "index_bits": INDEX_BITS,
        "payload_bits": PAYLOAD_BITS,
        "matrices": {
            n: {
                "rows": e.rows, "cols": e.cols, "n_pe": e.n_pe,
                "width": e.format.width, "frac": e.format.frac,
                "words": e.total_words, "real_nnz": e.real_nnz,
            }
            for n, e in matrices.items()
        },
        **(extra_meta or {}),
    }
    tensors: dict[str, np.ndarray] = {}
    for n, e in matrices.items():
        tensors.update(encoded_tensors(n, e))
    return write_container(path, meta, tensors)


def load_encoded(path: str | Path) -> tuple[dict, dict[str, EncodedSparseMatrix]]:
    manifest, tensors = read_container(path)
    if manifest.get("kind") != "encoded-model":
        raise ValidationError(f"{path}: not an encoded model container")
    out = {}
    for n, info in manifest["matrices"].items():
        n_pe = int(info["n_pe"])
        out[n] = EncodedSparseMatrix(
            rows=int(info["rows"]),
            cols=int(info["cols"]),
            n_pe=n_pe,
            col_ptr=tensors[f"{n}/col_ptr"].astype(np.int64),
            words=[tensors[f"{n}/pe{p:03d}"] for p in range(n_pe)],
            real_counts=tensors[f"{n}/real_counts"].astype(np.int64),
            format=FixedFormat(int(info["width"]), int(info["frac"])),
        )
    return manifest, out
