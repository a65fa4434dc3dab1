"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"BWCP" | u32 version | u64 header length | header (UTF-8 JSON)
    | payload (raw tensors) | sha256 of everything before it (32 bytes)

The header holds a manifest of tensors (name, dtype, shape, offset,
nbytes) plus free-form metadata: config snapshot, RNG state, epoch, and
the checkpoint kind. Floats are stored as '<f8', index arrays as '<i8'.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ChecksumError

MAGIC = b"BWCP"
VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def _encode(arr):
    arr = np.asarray(arr)
    if arr.dtype.kind in "iub":
        return "i8", np.ascontiguousarray(arr, dtype="<i8")
    if arr.dtype.kind == "f":
        return "f8", np.ascontiguousarray(arr, dtype="<f8")
    raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")


def dumps(tensors, meta):
    manifest = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        code, data = _encode(arr)
        raw = data.tobytes()
        manifest.append({"name": name, "dtype": code, "shape": list(data.shape),
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": manifest, "meta": meta}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def loads(blob):
    if len(blob) < 16 + 32 or blob[:4] != MAGIC:
        raise CheckpointError("not a BWCP checkpoint (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch (file is corrupt)")
    version, hlen = struct.unpack("<IQ", body[4:16])
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported "
                              f"(expected {VERSION})")
    try:
        header = json.loads(body[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from None
    payload = body[16 + hlen:]
    tensors = {}
    for t in header["tensors"]:
        raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
        if len(raw) != t["nbytes"]:
            raise CheckpointError(f"tensor {t['name']} is truncated")
        tensors[t["name"]] = np.frombuffer(raw, dtype=_DTYPES[t["dtype"]]).reshape(t["shape"]).copy()
    return tensors, header["meta"]


def save(path, tensors, meta):
    """Write atomically: a partial file never replaces a good one."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(tensors, meta))
    os.replace(tmp, path)


def load(path):
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    return loads(blob)


# -- model state ----------------------------------------------------------------

def model_tensors(model, optimizer=None):
    out = {}
    for name, value, _, _ in model.named_parameters():
        out[name] = value
    for name, value in model.named_buffers():
        out[name] = value
    if optimizer is not None:
        for name, v in optimizer.velocity.items():
            out[f"optim.velocity.{name}"] = v
    return out


def model_flags(model):
    return {u.name: bool(u.bw.running_rinv.initialized) for u in model.units()}


def restore_model(model, tensors, flags, optimizer=None):
    """Copy saved arrays into ``model`` (and ``optimizer``) in place."""
    targets = dict((n, v) for n, v, _, _ in model.named_parameters())
    targets.update(dict(model.named_buffers()))
    if optimizer is not None:
        targets.update({f"optim.velocity.{n}": v for n, v in optimizer.velocity.items()})
    for name, dst in targets.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name}")
        src = tensors[name]
        if src.shape != dst.shape:
            raise CheckpointError(f"tensor {name}: shape {src.shape} does not match {dst.shape}")
        dst[...] = src
    for u in model.units():
        if u.name not in flags:
            raise CheckpointError(f"checkpoint lacks the statistics flag of {u.name}")
        u.bw.running_rinv.initialized = bool(flags[u.name])


def rng_state(rng):
    return rng.bit_generator.state


def rng_from_state(state):
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)
