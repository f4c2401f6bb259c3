"""Minimal volume I/O: single-file NIfTI-1 (float32, 3D, little-endian) and raw f32.

Only the fields needed to locate and shape the voxel data are honored.
Scaling, orientation and units are written as neutral values and ignored
on read. Slices are taken along the last axis.
"""

import json
import os
import struct

import numpy as np

from .errors import (BadMagicError, DimensionError, TruncatedFileError,
                     UnsupportedDatatypeError, VolumeFormatError)

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\0"
FLOAT32 = 16

# (offset, struct format) of each header field we read or write.
_FIELDS = {
    "sizeof_hdr": (0, "<i"),
    "dim": (40, "<8h"),
    "datatype": (70, "<h"),
    "bitpix": (72, "<h"),
    "pixdim": (76, "<8f"),
    "vox_offset": (108, "<f"),
    "scl_slope": (112, "<f"),
    "scl_inter": (116, "<f"),
    "descrip": (148, "80s"),
    "magic": (344, "4s"),
}


def _put(buf, name, *values):
    off, fmt = _FIELDS[name]
    struct.pack_into(fmt, buf, off, *values)


def _get(buf, name):
    off, fmt = _FIELDS[name]
    out = struct.unpack_from(fmt, buf, off)
    return out if len(out) > 1 else out[0]


def _as_volume(volume):
    if isinstance(volume, (list, tuple)):
        volume = np.stack([np.asarray(s) for s in volume], axis=-1)
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise DimensionError(f"volume must be 3D, got shape {volume.shape}")
    return volume.astype("<f4", copy=False)


def write_nifti(path, volume, pixdim=(1.0, 1.0, 1.0), descrip=""):
    """Write a 3D volume (or list of 2D slices) as float32 NIfTI-1."""
    vol = _as_volume(volume)
    hdr = bytearray(VOX_OFFSET)  # header plus the 4-byte empty extension block
    _put(hdr, "sizeof_hdr", HEADER_SIZE)
    _put(hdr, "dim", 3, *vol.shape, 1, 1, 1, 1)
    _put(hdr, "datatype", FLOAT32)
    _put(hdr, "bitpix", 32)
    _put(hdr, "pixdim", 1.0, *pixdim, 1.0, 1.0, 1.0, 1.0)
    _put(hdr, "vox_offset", float(VOX_OFFSET))
    _put(hdr, "scl_slope", 0.0)
    _put(hdr, "scl_inter", 0.0)
    _put(hdr, "descrip", descrip.encode("ascii", "replace")[:79])
    _put(hdr, "magic", MAGIC)
    # NIfTI stores x fastest, i.e. Fortran order.
    data = vol.tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(data)


def read_nifti(path):
    """Return (volume float32 (nx, ny, nz), header dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < VOX_OFFSET:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is shorter than a NIfTI-1 header",
                                 offset=len(raw), field="header")
    size = _get(raw, "sizeof_hdr")
    if size != HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
            raise VolumeFormatError(f"{path}: big-endian NIfTI is not supported",
                                    offset=0, field="sizeof_hdr")
        raise VolumeFormatError(f"{path}: sizeof_hdr is {size}, expected {HEADER_SIZE}",
                                offset=0, field="sizeof_hdr")
    magic = _get(raw, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"{path}: magic {magic!r}, expected {MAGIC!r}",
                            offset=_FIELDS["magic"][0], field="magic")
    datatype = _get(raw, "datatype")
    if datatype != FLOAT32:
        raise UnsupportedDatatypeError(
            f"{path}: datatype code {datatype}, only {FLOAT32} (float32) is supported",
            offset=_FIELDS["datatype"][0], field="datatype")
    dim = _get(raw, "dim")
    if dim[0] != 3 or min(dim[1:4]) < 1:
        raise VolumeFormatError(f"{path}: expected a 3D volume, dim = {dim[:4]}",
                                offset=_FIELDS["dim"][0], field="dim")
    vox_offset = int(_get(raw, "vox_offset"))
    if vox_offset < VOX_OFFSET:
        raise VolumeFormatError(f"{path}: vox_offset {vox_offset} < {VOX_OFFSET}",
                                offset=_FIELDS["vox_offset"][0], field="vox_offset")
    shape = tuple(dim[1:4])
    nbytes = 4 * int(np.prod(shape))
    if len(raw) < vox_offset + nbytes:
        raise TruncatedFileError(
            f"{path}: voxel data needs {nbytes} bytes, file has {len(raw) - vox_offset}",
            offset=vox_offset, field="data")
    vol = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=vox_offset)
    vol = vol.reshape(shape, order="F").astype(np.float32)
    header = {"dims": list(shape), "pixdim": list(_get(raw, "pixdim")[1:4]),
              "datatype": datatype, "vox_offset": vox_offset}
    return vol, header


def write_raw(path, volume, seed=None):
    """Write ``path`` (.f32, C order) plus a ``.json`` sidecar next to it."""
    path = os.fspath(path)
    vol = _as_volume(volume)
    stem = path[:-4] if path.endswith(".f32") else path
    with open(stem + ".f32", "wb") as fh:
        fh.write(vol.tobytes(order="C"))
    sidecar = {"dims": list(vol.shape), "dtype": "f32le", "seed": seed}
    with open(stem + ".json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True)


def read_raw(path):
    path = os.fspath(path)
    stem = path[:-4] if path.endswith(".f32") else path
    try:
        with open(stem + ".json") as fh:
            sidecar = json.load(fh)
    except FileNotFoundError as exc:
        raise VolumeFormatError(f"{stem}.json: sidecar header missing") from exc
    except ValueError as exc:
        raise VolumeFormatError(f"{stem}.json: invalid sidecar: {exc}") from exc
    if sidecar.get("dtype") != "f32le":
        raise UnsupportedDatatypeError(f"{stem}.json: dtype {sidecar.get('dtype')!r}",
                                       field="dtype")
    shape = tuple(int(d) for d in sidecar["dims"])
    with open(stem + ".f32", "rb") as fh:
        raw = fh.read()
    nbytes = 4 * int(np.prod(shape))
    if len(raw) < nbytes:
        raise TruncatedFileError(f"{stem}.f32: {len(raw)} bytes, expected {nbytes}",
                                 offset=len(raw), field="data")
    vol = np.frombuffer(raw, dtype="<f4", count=nbytes // 4).reshape(shape).astype(np.float32)
    return vol, sidecar


def _is_raw(path):
    return path.endswith((".f32", ".json"))


def read_volume(path):
    """Return (list of 2D float32 slices along the last axis, header dict)."""
    path = os.fspath(path)
    if not os.path.exists(path) and not (_is_raw(path) or os.path.exists(path + ".f32")):
        raise FileNotFoundError(path)
    if _is_raw(path):
        vol, header = read_raw(path[:-5] if path.endswith(".json") else path)
    else:
        vol, header = read_nifti(path)
    return [vol[:, :, k].copy() for k in range(vol.shape[2])], header


def write_volume(path, volume, seed=None):
    """Write slices or a 3D array; the format follows the file suffix."""
    path = os.fspath(path)
    if _is_raw(path):
        write_raw(path, volume, seed)
    else:
        write_nifti(path, volume)
