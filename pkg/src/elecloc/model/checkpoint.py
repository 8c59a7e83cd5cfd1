"""Versioned binary tensor dump.

Layout: an ASCII magic line, an 8-byte little-endian header length, a JSON
header (model config, its hash, free-form metadata and a tensor table), then
the raw little-endian tensor bytes in table order. Tensors round-trip
bit-exactly.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"ELECLOC-CKPT\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict, config_hash: str, meta: dict | None = None) -> None:
    """Write ``tensors`` atomically (temp file + rename)."""
    table, blobs, offset = [], [], 0
    for name in tensors:
        arr = np.ascontiguousarray(tensors[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|", "<") else arr.dtype
        raw = arr.astype(dt, copy=False).tobytes()
        table.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": VERSION,
        "config": config,
        "config_hash": config_hash,
        "meta": meta or {},
        "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(hbytes)))
            fh.write(hbytes)
            for raw in blobs:
                fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, expect_hash: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, header)``; checks magic, version, sizes and optionally the config hash."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", data[pos : pos + 8])
    pos += 8
    try:
        header = json.loads(data[pos : pos + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if expect_hash is not None and header["config_hash"] != expect_hash:
        raise CheckpointError(f"{path}: config hash {header['config_hash']} does not match {expect_hash}")
    base = pos + hlen
    tensors = {}
    for t in header["tensors"]:
        start = base + t["offset"]
        chunk = data[start : start + t["nbytes"]]
        if len(chunk) != t["nbytes"]:
            raise CheckpointError(f"{path}: tensor {t['name']} is truncated")
        tensors[t["name"]] = np.frombuffer(chunk, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
    return tensors, header
