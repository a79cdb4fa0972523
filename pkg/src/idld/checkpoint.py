"""Binary checkpoints.

Layout::

    b"DYND" | u32 LE version | u32 LE manifest length | JSON manifest | float32 LE block

The manifest lists every stored array (model parameters first, then
optimizer moments) with its name, shape and byte offset into the block.
Arrays must tile the block back to back in manifest order; anything else is
an offset error. Values are stored as 32-bit floats, so a loaded model holds
the float32 rounding of what was saved, and saving it again reproduces the
file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    CheckpointFormatError,
    CheckpointOffsetError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)

MAGIC = b"DYND"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")
_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    """In-memory checkpoint. Arrays are float32.

    ``optimizer`` is ``None`` or ``{"step", "hyper", "m", "v"}`` with ``m`` and
    ``v`` mapping parameter names to moment arrays.
    """

    config_hash: str
    config: dict
    model: dict
    params: dict
    epoch: int = 0
    rng_state: Optional[dict] = None
    optimizer: Optional[dict] = None
    version: int = FORMAT_VERSION
    meta: dict = field(default_factory=dict)


def _entries(ckpt):
    for name, arr in ckpt.params.items():
        yield "params", name, arr
    if ckpt.optimizer is not None:
        for kind in ("m", "v"):
            for name, arr in ckpt.optimizer[kind].items():
                yield kind, name, arr


def to_bytes(ckpt):
    manifest_params = {"params": [], "m": [], "v": []}
    blobs = []
    offset = 0
    for group, name, arr in _entries(ckpt):
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        manifest_params[group].append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    optimizer = None
    if ckpt.optimizer is not None:
        optimizer = {"step": ckpt.optimizer["step"], "hyper": ckpt.optimizer["hyper"],
                     "m": manifest_params["m"], "v": manifest_params["v"]}
    manifest = {
        "format_version": ckpt.version,
        "config_hash": ckpt.config_hash,
        "config": ckpt.config,
        "model": ckpt.model,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "params": manifest_params["params"],
        "optimizer": optimizer,
        "block_bytes": offset,
        "meta": ckpt.meta,
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return _HEADER.pack(MAGIC, ckpt.version, len(text)) + text + b"".join(blobs)


def save(ckpt, path):
    data = to_bytes(ckpt)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def _read_arrays(entries, block, cursor, where):
    out = {}
    for e in entries:
        try:
            name, shape, offset = e["name"], tuple(e["shape"]), int(e["offset"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointFormatError(f"malformed {where} manifest entry {e!r}") from None
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if offset != cursor:
            raise CheckpointOffsetError(f"{where} entry {name!r} has offset {offset}, expected {cursor}")
        if offset + nbytes > len(block):
            raise CheckpointOffsetError(f"{where} entry {name!r} runs past the parameter block")
        out[name] = np.frombuffer(block, dtype=_DTYPE, count=nbytes // 4, offset=offset).reshape(shape).copy()
        cursor += nbytes
    return out, cursor


def from_bytes(data):
    if len(data) < _HEADER.size:
        raise CheckpointTruncatedError(f"file is {len(data)} bytes, shorter than the header")
    magic, version, mlen = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} is not supported (expected {FORMAT_VERSION})")
    start = _HEADER.size
    if len(data) < start + mlen:
        raise CheckpointTruncatedError("file ends inside the manifest")
    try:
        manifest = json.loads(data[start:start + mlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"manifest is not valid JSON: {exc}") from None
    if manifest.get("format_version") != version:
        raise CheckpointVersionError("manifest version disagrees with the header")
    block = data[start + mlen:]
    expected = manifest.get("block_bytes")
    if not isinstance(expected, int):
        raise CheckpointFormatError("manifest lacks block_bytes")
    if len(block) < expected:
        raise CheckpointTruncatedError(f"parameter block has {len(block)} bytes, manifest declares {expected}")
    if len(block) > expected:
        raise CheckpointFormatError(f"{len(block) - expected} trailing bytes after the parameter block")

    block = memoryview(block)
    params, cursor = _read_arrays(manifest.get("params", []), block, 0, "params")
    optimizer = None
    opt = manifest.get("optimizer")
    if opt is not None:
        m, cursor = _read_arrays(opt["m"], block, cursor, "optimizer.m")
        v, cursor = _read_arrays(opt["v"], block, cursor, "optimizer.v")
        optimizer = {"step": opt["step"], "hyper": opt["hyper"], "m": m, "v": v}
    if cursor != expected:
        raise CheckpointOffsetError(f"manifest covers {cursor} bytes of a {expected}-byte block")
    return Checkpoint(
        config_hash=manifest["config_hash"], config=manifest["config"], model=manifest["model"],
        params=params, epoch=manifest["epoch"], rng_state=manifest["rng_state"],
        optimizer=optimizer, version=version, meta=manifest.get("meta", {}),
    )


def load(path):
    return from_bytes(Path(path).read_bytes())
