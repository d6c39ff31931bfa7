"""File formats: DVTF tensors, DVCK parameter checkpoints, plain PGM previews and CSV.

DVTF layout (all little-endian)::

    b"DVTF" | u16 version=1 | u8 dtype (0=f64, 1=f32) | u8 ndim | ndim x u64 shape | payload

DVCK wraps a JSON metadata record and a list of named DVTF records::

    b"DVCK" | u16 version=1 | u32 len | JSON | u32 count | count x (u16 len | name | u64 len | DVTF)
"""

from __future__ import annotations

import csv
import io as _io
import json
import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

TENSOR_MAGIC = b"DVTF"
CKPT_MAGIC = b"DVCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_HEADER = struct.Struct("<4sHBB")


class FormatError(ValueError):
    pass


def encode_tensor(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    code = _CODES.get(x.dtype.newbyteorder("="))
    if code is None:
        raise FormatError(f"unsupported dtype {x.dtype}; use float64 or float32")
    if x.ndim > 255:
        raise FormatError("too many dimensions")
    head = _HEADER.pack(TENSOR_MAGIC, VERSION, code, x.ndim) + struct.pack(f"<{x.ndim}Q", *x.shape)
    return head + np.ascontiguousarray(x, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor at ``offset``; returns ``(array, offset after it)``."""
    if len(buf) - offset < _HEADER.size:
        raise FormatError("truncated tensor header")
    magic, version, code, ndim = _HEADER.unpack_from(buf, offset)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    offset += _HEADER.size
    shape = struct.unpack_from(f"<{ndim}Q", buf, offset)
    offset += 8 * ndim
    dtype = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - offset < nbytes:
        raise FormatError(f"payload holds {len(buf) - offset} bytes, shape {shape} needs {nbytes}")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
    # native byte order, owned and writable
    arr = arr.astype(dtype.newbyteorder("="), copy=True).reshape(shape)
    return arr, offset + nbytes


def write_tensor(path, x: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(x))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor in {path}")
    return arr


def write_checkpoint(path, tensors: Mapping[str, np.ndarray], metadata: Mapping) -> None:
    meta = json.dumps(dict(metadata), sort_keys=True).encode()
    out = [CKPT_MAGIC, struct.pack("<HI", VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        key = name.encode()
        rec = encode_tensor(arr)
        out += [struct.pack("<H", len(key)), key, struct.pack("<Q", len(rec)), rec]
    Path(path).write_bytes(b"".join(out))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    try:
        return _parse_checkpoint(buf, path)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc


def _parse_checkpoint(buf: bytes, path):
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path} is not a checkpoint")
    version, mlen = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 10
    meta = json.loads(buf[off:off + mlen])
    off += mlen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", buf, off)
        name = buf[off + 2:off + 2 + klen].decode()
        off += 2 + klen
        (rlen,) = struct.unpack_from("<Q", buf, off)
        off += 8
        arr, end = decode_tensor(buf[off:off + rlen])
        if end != rlen:
            raise FormatError(f"record {name!r} has a bad length")
        tensors[name] = arr
        off += rlen
    if off != len(buf):
        raise FormatError("trailing bytes after checkpoint records")
    return tensors, meta


def tile_channels(x: np.ndarray) -> np.ndarray:
    """2-D view for previews: ``(C, H, W)`` channels side by side, 1-D as one row."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :]
    if x.ndim == 2:
        return x
    if x.ndim == 3:
        return np.concatenate(list(x), axis=1)
    raise FormatError(f"cannot preview a {x.ndim}-d tensor")


def encode_pgm(x: np.ndarray) -> str:
    """Plain (P2) greymap; values mapped affinely from ``[min, max]`` to ``[0, 255]``."""
    img = tile_channels(x)
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        grey = np.rint((img - lo) * (255.0 / (hi - lo))).astype(int)
    else:
        grey = np.zeros(img.shape, dtype=int)
    rows = [" ".join(str(v) for v in row) for row in grey]
    return f"P2\n{img.shape[1]} {img.shape[0]}\n255\n" + "\n".join(rows) + "\n"


def write_pgm(path, x: np.ndarray) -> None:
    Path(path).write_text(encode_pgm(x), encoding="ascii")


def fmt(v) -> str:
    """Locale-free number formatting that round-trips 64-bit floats."""
    if isinstance(v, (bool, np.bool_)):
        return "pass" if v else "fail"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()
