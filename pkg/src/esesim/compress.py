"""Magnitude pruning and load-balance-aware pruning.

Rows are dealt to processing elements round-robin: row ``r`` belongs to PE
``r % n_pe``. Load-balanced pruning gives every PE submatrix the same
nonzero quota so that no PE waits on a busier neighbour.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .errors import ShapeError, ValidationError

QUOTA_MODES = ("global", "pe", "row")


@dataclass(frozen=True)
class PePartition:
    n_pe: int

    def __post_init__(self) -> None:
        if self.n_pe < 1:
            raise ValidationError("n_pe must be >= 1")

    def check(self, rows: int) -> None:
        if self.n_pe > rows:
            raise ValidationError(f"n_pe={self.n_pe} exceeds the {rows} matrix rows")

    def rows_of(self, pe: int, rows: int) -> np.ndarray:
        return np.arange(pe, rows, self.n_pe)

    def pe_of_rows(self, rows: int) -> np.ndarray:
        return np.arange(rows) % self.n_pe


@dataclass
class PruneMask:
    kept: np.ndarray
    target_density: float
    mode: str = "global"
    n_pe: int = 1
    iteration: int = 0

    @property
    def rows(self) -> int:
        return self.kept.shape[0]

    @property
    def cols(self) -> int:
        return self.kept.shape[1]

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.kept))

    @property
    def density(self) -> float:
        return self.nnz / self.kept.size


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _check_density(density: float) -> None:
    if not (0.0 < density <= 1.0):
        raise ValidationError(f"density must lie in (0, 1], got {density}")


def _as_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def _top_k(values: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest |values|; ties go to the lower flat index."""
    flat = np.abs(values).ravel()
    keep = np.zeros(flat.size, dtype=bool)
    if k > 0:
        order = np.argsort(-flat, kind="stable")
        keep[order[:k]] = True
    return keep.reshape(values.shape)


def prune_magnitude(m, density: float) -> PruneMask:
    """Keep the ``round(density * size)`` largest-magnitude entries."""
    _check_density(density)
    m = _as_matrix(m)
    k = round_half_up(density * m.size)
    return PruneMask(_top_k(m, k), density)


def prune_load_balanced(m, density: float, part: PePartition, per_row: bool = False) -> PruneMask:
    """Prune each PE's row group to the same quota.

    With ``per_row`` every row gets its own quota of
    ``round(density * cols)`` entries instead.
    """
    _check_density(density)
    m = _as_matrix(m)
    rows, cols = m.shape
    part.check(rows)
    kept = np.zeros(m.shape, dtype=bool)
    if per_row:
        k = round_half_up(density * cols)
        for r in range(rows):
            kept[r] = _top_k(m[r], k)
        return PruneMask(kept, density, mode="row", n_pe=part.n_pe)
    for pe in range(part.n_pe):
        sub = m[pe::part.n_pe]
        kept[pe::part.n_pe] = _top_k(sub, round_half_up(density * sub.size))
    return PruneMask(kept, density, mode="pe", n_pe=part.n_pe)


def apply_mask(m, mask: PruneMask) -> np.ndarray:
    m = np.asarray(m)
    if m.shape != mask.kept.shape:
        raise ShapeError(f"mask shape {mask.kept.shape} does not match matrix {m.shape}")
    return np.where(mask.kept, m, np.zeros((), dtype=m.dtype))


def load_stats(mask: PruneMask | np.ndarray, part: PePartition) -> tuple[list[int], float]:
    """Nonzeros per PE and the imbalance ratio max/mean (1.0 when empty)."""
    kept = mask.kept if isinstance(mask, PruneMask) else np.asarray(mask, dtype=bool)
    per_row = np.count_nonzero(kept, axis=1)
    loads = np.bincount(part.pe_of_rows(kept.shape[0]), weights=per_row, minlength=part.n_pe)
    loads = [int(v) for v in loads]
    mean = sum(loads) / len(loads)
    return loads, (max(loads) / mean if mean > 0 else 1.0)


def save_masks(masks: dict[str, PruneMask], path: str | Path) -> Path:
    meta = {
        "kind": "prune-masks",
        "masks": {
            name: {
                "target_density": mk.target_density,
                "mode": mk.mode,
                "n_pe": mk.n_pe,
                "iteration": mk.iteration,
                "nnz": mk.nnz,
            }
            for name, mk in masks.items()
        },
    }
    return write_container(path, meta, {n: mk.kept for n, mk in masks.items()})


def load_masks(path: str | Path) -> dict[str, PruneMask]:
    manifest, tensors = read_container(path)
    if manifest.get("kind") != "prune-masks":
        raise ValidationError(f"{path}: not a mask container")
    out = {}
    for name, info in manifest["masks"].items():
        out[name] = PruneMask(
            tensors[name],
            float(info["target_density"]),
            mode=info["mode"],
            n_pe=int(info["n_pe"]),
            iteration=int(info["iteration"]),
        )
    return out
