"""Single-file parameter checkpoints.

Layout::

    8 bytes   magic b"PHUCKPT\\0"
    4 bytes   format version (uint32 LE)
    4 bytes   header length n (uint32 LE)
    n bytes   UTF-8 JSON header: shape table, payload CRC32, free-form metadata
    ...       concatenated float64 little-endian blobs, in shape-table order

Float32 parameters survive the round trip bit-exactly because every float32
is representable as a float64.
"""

import json
import os
import struct
import zlib

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, PHUNet

MAGIC = b"PHUCKPT\0"
VERSION = 1
_PREFIX = struct.Struct("<8sII")


def save_arrays(path, arrays, meta=None):
    """Write ``{name: array}`` plus JSON-serializable ``meta`` atomically."""
    table, blobs, offset = [], [], 0
    for name, value in arrays.items():
        blob = np.ascontiguousarray(value, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(np.shape(value)),
                      "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    header = json.dumps({"tensors": table, "crc32": zlib.crc32(payload),
                         "meta": meta or {}}, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
            fh.write(header)
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_arrays(path):
    """Inverse of :func:`save_arrays`; returns (arrays, meta) with float64 arrays."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    payload = raw[start:]
    expected = sum(t["nbytes"] for t in header["tensors"])
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    if zlib.crc32(payload) != header["crc32"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    arrays = {}
    for t in header["tensors"]:
        blob = payload[t["offset"]:t["offset"] + t["nbytes"]]
        arrays[t["name"]] = np.frombuffer(blob, dtype="<f8").reshape(t["shape"]).astype(np.float64)
    return arrays, header["meta"]


_M, _V = "adamw.m/", "adamw.v/"


def save_checkpoint(path, model, optimizer=None, meta=None):
    """Model parameters, optional AdamW moments and metadata in one file."""
    arrays = dict(model.state_dict())
    meta = dict(meta or {})
    meta["model_config"] = model.config.to_dict()
    meta["dtype"] = model.dtype.name
    if optimizer is not None:
        step, m, v = optimizer.state_arrays()
        names = list(model.params)
        for name, a, b in zip(names, m, v):
            arrays[_M + name] = a
            arrays[_V + name] = b
        meta["optimizer"] = {"step": step, "config": optimizer.config.to_dict()}
    save_arrays(path, arrays, meta)


def load_checkpoint(path, dtype=None):
    """Rebuild the model; returns (model, meta, optimizer_state or None).

    ``optimizer_state`` is ``(step, m_list, v_list)`` in parameter order.
    """
    arrays, meta = load_arrays(path)
    try:
        config = ModelConfig(**meta["model_config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: missing or invalid model config") from exc
    dtype = np.dtype(dtype or meta.get("dtype", "float64"))
    model = PHUNet(config, seed=0, dtype=dtype)
    params = {k: v for k, v in arrays.items() if not k.startswith((_M, _V))}
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    opt_state = None
    if "optimizer" in meta:
        names = list(model.params)
        try:
            m = [arrays[_M + n].astype(dtype) for n in names]
            v = [arrays[_V + n].astype(dtype) for n in names]
        except KeyError as exc:
            raise CheckpointError(f"{path}: optimizer moment {exc} missing") from exc
        opt_state = (meta["optimizer"]["step"], m, v)
    return model, meta, opt_state
