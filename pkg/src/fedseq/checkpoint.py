"""Binary checkpoints: magic, length-prefixed JSON manifest, float32 payload.

Layout::

    b"FSEQ1" | uint64 LE manifest length | manifest JSON (utf-8) | payload

The manifest maps each tensor name to its shape and byte offset in the
payload, and records the HyperParams and a SHA-256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .model import HyperParams, ModelParams, param_shapes

MAGIC = b"FSEQ1"
DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ModelParams, path, hyper: HyperParams, extra: Optional[dict] = None) -> None:
    """Write params atomically; ``extra`` is stored under the manifest's "extra" key."""
    shapes = param_shapes(hyper)
    if set(params) != set(shapes):
        raise CheckpointError(f"parameter names do not match hyper: "
                              f"missing={sorted(set(shapes) - set(params))} "
                              f"extra={sorted(set(params) - set(shapes))}")
    chunks, tensors, offset = [], [], 0
    for name in shapes:
        arr = np.ascontiguousarray(params[name], dtype=DTYPE)
        if arr.shape != shapes[name]:
            raise CheckpointError(f"tensor {name!r}: shape {arr.shape} != {shapes[name]}")
        raw = arr.tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = json.dumps({
        "format": "FSEQ1", "dtype": "<f4", "hyper": hyper.to_dict(), "tensors": tensors,
        "payload_bytes": len(payload), "sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        fh.write(payload)
    os.replace(tmp, path)


def read_manifest(path) -> dict:
    return _read(path)[0]


def _read(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    head = len(MAGIC) + 8
    if len(data) < head:
        raise CheckpointError(f"{path}: truncated header")
    (mlen,) = struct.unpack("<Q", data[len(MAGIC):head])
    if len(data) < head + mlen:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[head: head + mlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from exc
    payload = data[head + mlen:]
    if len(payload) != manifest.get("payload_bytes"):
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, manifest says "
                              f"{manifest.get('payload_bytes')} (truncated file?)")
    if hashlib.sha256(payload).hexdigest() != manifest.get("sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    return manifest, payload


def load_checkpoint(path, hyper: Optional[HyperParams] = None) -> ModelParams:
    """Load params; with ``hyper`` given, names and shapes must match it exactly."""
    manifest, payload = _read(path)
    stored_hyper = HyperParams.from_dict(manifest["hyper"])
    expected = param_shapes(hyper if hyper is not None else stored_hyper)
    entries = {t["name"]: t for t in manifest["tensors"]}
    missing, extra = set(expected) - set(entries), set(entries) - set(expected)
    if missing or extra:
        raise CheckpointError(f"{path}: tensor names differ: missing={sorted(missing)} extra={sorted(extra)}")
    params = {}
    for name, shape in expected.items():
        e = entries[name]
        if tuple(e["shape"]) != shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {tuple(e['shape'])}, expected {shape}")
        n = int(np.prod(shape)) * DTYPE.itemsize
        if e["nbytes"] != n or e["offset"] + n > len(payload):
            raise CheckpointError(f"{path}: tensor {name!r} has an inconsistent byte range")
        params[name] = np.frombuffer(payload, dtype=DTYPE, count=n // DTYPE.itemsize,
                                     offset=e["offset"]).reshape(shape).astype(np.float32)
    return params


def load_hyper(path) -> HyperParams:
    return HyperParams.from_dict(read_manifest(path)["hyper"])
