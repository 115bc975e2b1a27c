"""Tensor archive: a UTF-8 JSON manifest next to one little-endian float32 blob.

Layout on disk::

    <archive>/manifest.json
    <archive>/weights.bin

Each tensor starts at a 64-byte aligned offset and is stored row-major.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT = "chessinterp-archive"
VERSION = 1
ALIGN = 64
MANIFEST = "manifest.json"
BLOB = "weights.bin"


class ArchiveError(ValueError):
    pass


def _resolve(path) -> Path:
    path = Path(path)
    if path.name == MANIFEST:
        return path.parent
    return path


def write_archive(path, config: dict, tensors: dict) -> str:
    """Write tensors + config; returns the blob's sha256."""
    root = _resolve(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        pad = (-offset) % ALIGN
        if pad:
            chunks.append(b"\0" * pad)
            offset += pad
        data = arr.tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset, "nbytes": len(data)}
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    digest = hashlib.sha256(blob).hexdigest()
    (root / BLOB).write_bytes(blob)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "blob": BLOB,
        "blob_sha256": digest,
        "config": config,
        "tensors": entries,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return digest


def read_archive(path, verify_hash: bool = True) -> tuple[dict, dict, str]:
    """Returns (config, tensors, blob sha256). Tensors are read-only views of the blob."""
    root = _resolve(path)
    mpath = root / MANIFEST
    if not mpath.exists():
        raise ArchiveError(f"no {MANIFEST} in {root}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise ArchiveError(f"{mpath}: not a {FORMAT} manifest")
    if manifest.get("version") != VERSION:
        raise ArchiveError(f"{mpath}: unsupported version {manifest.get('version')}")
    blob = (root / manifest.get("blob", BLOB)).read_bytes()
    digest = hashlib.sha256(blob).hexdigest()
    if verify_hash and digest != manifest.get("blob_sha256"):
        raise ArchiveError(f"{root}: blob checksum mismatch")
    buf = np.frombuffer(blob, dtype=np.uint8)
    tensors = {}
    for name, e in manifest["tensors"].items():
        if e.get("dtype") != "float32":
            raise ArchiveError(f"tensor {name}: unsupported dtype {e.get('dtype')}")
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start, nbytes = e["offset"], e["nbytes"]
        if nbytes != 4 * count:
            raise ArchiveError(f"tensor {name}: nbytes {nbytes} does not match shape {e['shape']}")
        if start % ALIGN:
            raise ArchiveError(f"tensor {name}: offset {start} not {ALIGN}-byte aligned")
        if start + nbytes > len(blob):
            raise ArchiveError(f"tensor {name}: extent {start}+{nbytes} exceeds blob size {len(blob)}")
        arr = buf[start:start + nbytes].view("<f4").reshape(e["shape"])
        tensors[name] = arr
    return manifest["config"], tensors, digest
