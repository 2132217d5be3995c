"""Raw tensor files and multi-tensor checkpoints.

Tensor file layout: magic b"AITT", u8 dtype code, u8 ndim, ndim little-endian
u32 dims, then the little-endian payload. Checkpoints are a JSON manifest
header followed by an ordered list of (name, tensor) records in one file.
All writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

TENSOR_MAGIC = b"AITT"
CHECKPOINT_MAGIC = b"AITC"

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i4"): 2,
    np.dtype("u1"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class FormatError(ValueError):
    """File does not follow the tensor/checkpoint layout."""


def _atomic_write(path, payload: bytes):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def tensor_bytes(arr: np.ndarray) -> bytes:
    # asarray with order="C", not ascontiguousarray: the latter turns 0-d into 1-d
    arr = np.asarray(arr, order="C")
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    arr = arr.astype(dt, copy=False)
    if arr.dtype not in _DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}; use f32/f64/i32/u8")
    if arr.ndim > 255:
        raise FormatError("too many dimensions")
    head = TENSOR_MAGIC + struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + dims + arr.tobytes()


def tensor_from_bytes(buf: bytes, offset=0):
    """Parse one tensor record; returns (ndarray, next_offset)."""
    if buf[offset : offset + 4] != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic at offset {offset}")
    code, ndim = struct.unpack_from("<BB", buf, offset + 4)
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", buf, offset + 6)
    dtype = _CODE_DTYPES[code]
    start = offset + 6 + 4 * ndim
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
    end = start + nbytes
    if end > len(buf):
        raise FormatError("truncated tensor payload")
    arr = np.frombuffer(buf[start:end], dtype=dtype).reshape(dims)
    return arr.copy(), end


def save_tensor(path, arr):
    _atomic_write(path, tensor_bytes(arr))


def load_tensor(path):
    with open(path, "rb") as fh:
        arr, _ = tensor_from_bytes(fh.read())
    return arr


def save_checkpoint(path, manifest: dict, tensors):
    """Write manifest + ordered (name, array) records.

    ``tensors`` is an iterable of (name, ndarray); order is preserved on load.
    """
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(mbytes)), mbytes]
    records = list(tensors)
    parts.append(struct.pack("<I", len(records)))
    for name, arr in records:
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(tensor_bytes(np.asarray(arr)))
    _atomic_write(path, b"".join(parts))


def load_checkpoint(path):
    """Returns (manifest dict, ordered {name: ndarray})."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    try:
        (mlen,) = struct.unpack_from("<I", buf, 4)
        if 8 + mlen > len(buf):
            raise FormatError(f"{path}: truncated manifest")
        manifest = json.loads(buf[8 : 8 + mlen].decode())
        off = 8 + mlen
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(n):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode()
            off += nlen
            arr, off = tensor_from_bytes(buf, off)
            tensors[name] = arr
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    return manifest, tensors


def save_pgm(path, image, max_val=None):
    """8-bit binary PGM preview of a 2d float array."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise FormatError(f"pgm wants 2d, got shape {img.shape}")
    top = float(max_val) if max_val is not None else max(float(img.max()), 1e-12)
    scaled = np.clip(img / top, 0.0, 1.0)
    data = (scaled * 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    _atomic_write(path, header + data.tobytes())
