"""Single-file checkpoint container.

Layout: 8-byte magic, little-endian u64 manifest length, UTF-8 JSON manifest,
then the raw little-endian array bytes in manifest order. The manifest lists
every array (name, dtype, shape, byte offset), the format version, the config
hash, the epoch, free-form JSON metadata and a SHA-256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import CorruptCheckpointError, CheckpointVersionError

MAGIC = b"MIRAUCKP"
VERSION = 1


@dataclass
class Checkpoint:
    arrays: "OrderedDict[str, np.ndarray]"
    config_hash: str
    epoch: int
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def _le(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def encode(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in ckpt.arrays.items():
        raw = _le(np.asarray(arr)).tobytes()
        entries.append({"name": name, "dtype": np.dtype(arr.dtype).newbyteorder("<").str,
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {"version": ckpt.version, "config_hash": ckpt.config_hash, "epoch": ckpt.epoch,
                "arrays": entries, "meta": ckpt.meta,
                "sha256": hashlib.sha256(payload).hexdigest()}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(head)) + head + payload


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint file (bad magic or truncated header)")
    (n,) = struct.unpack("<Q", blob[8:16])
    if 16 + n > len(blob):
        raise CorruptCheckpointError("truncated manifest")
    try:
        manifest = json.loads(blob[16:16 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable manifest: {exc}") from exc
    if manifest.get("version") != VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {manifest.get('version')} is not supported (expected {VERSION})")
    payload = blob[16 + n:]
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise CorruptCheckpointError("payload checksum mismatch (truncated or modified file)")
    arrays = OrderedDict()
    for e in manifest["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        dt = np.dtype(e["dtype"])
        arr = np.frombuffer(raw, dtype=dt).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return Checkpoint(arrays, manifest["config_hash"], manifest["epoch"], manifest["meta"],
                      manifest["version"])


def save(path, ckpt: Checkpoint) -> None:
    """Atomic write: temp file in the target directory, fsync, rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(encode(ckpt))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def prefixed(prefix: str, arrays: Mapping[str, np.ndarray]) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((f"{prefix}{k}", v) for k, v in arrays.items())


def strip(prefix: str, arrays: Mapping[str, np.ndarray]) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k[len(prefix):], v) for k, v in arrays.items() if k.startswith(prefix))
