"""Manifest + blob container used by every on-disk artifact.

A container is a JSON manifest and one little-endian binary blob that sits
next to it (``model.json`` + ``model.bin``). The manifest lists each tensor
with its ``dims``, ``dtype``, ``offset``, ``byte_len`` and ``sha256``; any
other top-level keys are free-form metadata owned by the caller.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import ChecksumError, ContainerIOError, ShapeError, ValidationError

DTYPES: dict[str, np.dtype] = {
    "f64": np.dtype("<f8"),
    "i64": np.dtype("<i8"),
    "i32": np.dtype("<i4"),
    "i16": np.dtype("<i2"),
    "u16": np.dtype("<u2"),
    "u8": np.dtype("u1"),
}
BITS = "bits"


def blob_path(manifest_path: str | Path) -> Path:
    return Path(manifest_path).with_suffix(".bin")


def _expected_len(dims: list[int], dtype: str) -> int:
    n = math.prod(dims)
    if dtype == BITS:
        return (n + 7) // 8
    return n * DTYPES[dtype].itemsize


def _encode(arr: np.ndarray, dtype: str) -> bytes:
    if dtype == BITS:
        return np.packbits(np.asarray(arr, dtype=bool).ravel(), bitorder="little").tobytes()
    return np.ascontiguousarray(arr, dtype=DTYPES[dtype]).tobytes()


def _decode(raw: bytes, dims: list[int], dtype: str) -> np.ndarray:
    if dtype == BITS:
        n = math.prod(dims)
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little", count=n)
        return bits.astype(bool).reshape(dims)
    return np.frombuffer(raw, dtype=DTYPES[dtype]).reshape(dims).copy()


def _dtype_of(arr: np.ndarray) -> str:
    if arr.dtype == bool:
        return BITS
    for name, dt in DTYPES.items():
        if arr.dtype == dt.newbyteorder("=") or arr.dtype == dt:
            return name
    raise ValidationError(f"unsupported array dtype {arr.dtype}")


def write_container(
    path: str | Path,
    meta: Mapping[str, Any],
    tensors: Mapping[str, np.ndarray],
    dtypes: Mapping[str, str] | None = None,
) -> Path:
    """Write ``tensors`` into ``path`` (manifest) and its sibling ``.bin`` blob.

    Output is canonical: the same inputs always produce byte-identical files.
    """
    path = Path(path)
    dtypes = dtypes or {}
    entries: dict[str, dict[str, Any]] = {}
    chunks: list[bytes] = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = dtypes.get(name) or _dtype_of(arr)
        raw = _encode(arr, dtype)
        entries[name] = {
            "dims": [int(d) for d in arr.shape],
            "dtype": dtype,
            "offset": offset,
            "byte_len": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        }
        chunks.append(raw)
        offset += len(raw)

    manifest = dict(meta)
    manifest["blob"] = blob_path(path).name
    manifest["tensors"] = entries
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path(path).write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ContainerIOError(f"cannot read manifest {path}: {exc.strerror}") from exc
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON manifest ({exc})") from exc
    if not isinstance(manifest, dict) or "tensors" not in manifest:
        raise ValidationError(f"{path}: manifest has no 'tensors' section")
    return manifest


def read_container(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Load a container, verifying shape, length and checksum of every tensor."""
    path = Path(path)
    manifest = read_manifest(path)
    bpath = path.parent / manifest.get("blob", blob_path(path).name)
    try:
        blob = bpath.read_bytes()
    except OSError as exc:
        raise ContainerIOError(f"missing blob {bpath}: {exc.strerror}") from exc

    tensors: dict[str, np.ndarray] = {}
    for name, entry in manifest["tensors"].items():
        dims = [int(d) for d in entry["dims"]]
        dtype = entry["dtype"]
        if dtype != BITS and dtype not in DTYPES:
            raise ValidationError(f"tensor {name!r}: unknown dtype {dtype!r}")
        offset, byte_len = int(entry["offset"]), int(entry["byte_len"])
        want = _expected_len(dims, dtype)
        if byte_len != want:
            raise ShapeError(
                f"tensor {name!r}: manifest dims {dims} need {want} bytes "
                f"but byte_len is {byte_len}"
            )
        end = offset + byte_len
        if end > len(blob):
            raise ContainerIOError(
                f"tensor {name!r}: blob {bpath.name} truncated at byte offset "
                f"{len(blob)}, expected data up to offset {end}"
            )
        raw = blob[offset:end]
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise ChecksumError(f"tensor {name!r}: sha256 mismatch at offset {offset}")
        tensors[name] = _decode(raw, dims, dtype)
    return manifest, tensors


def file_digest(path: str | Path) -> str:
    """sha256 over a container manifest and its blob (or a plain file)."""
    path = Path(path)
    h = hashlib.sha256()
    try:
        h.update(path.read_bytes())
        bpath = blob_path(path)
        if path.suffix == ".json" and bpath.exists():
            h.update(bpath.read_bytes())
    except OSError as exc:
        raise ContainerIOError(f"cannot read {path}: {exc.strerror}") from exc
    return h.hexdigest()
