"""T4SN binary tensor files and parameter checkpoints.

Tensor file layout (all integers little-endian)::

    b"T4SN" | u32 version=1 | u8 dtype=0 (float64) | u32 ndim | ndim x u32 dims | payload

The payload is the row-major float64 data.  A checkpoint is a text header
followed by one T4SN tensor holding every array concatenated; see
``docs/formats.md``.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"T4SN"
VERSION = 1
DTYPE_F64 = 0

CKPT_MAGIC = "T4SN-CKPT"
CKPT_VERSION = 1


class FormatError(ValueError):
    """Malformed or truncated file."""


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    header = MAGIC + struct.pack("<IBI", VERSION, DTYPE_F64, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; return it and the end offset."""
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError(f"bad magic at byte {offset}: {buf[offset:offset + 4]!r}")
    pos = offset + 4
    if len(buf) < pos + 9:
        raise FormatError(f"truncated header at byte {pos}")
    version, dtype, ndim = struct.unpack_from("<IBI", buf, pos)
    pos += 9
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dtype != DTYPE_F64:
        raise FormatError(f"unsupported dtype code {dtype}")
    if len(buf) < pos + 4 * ndim:
        raise FormatError(f"truncated dims at byte {pos}")
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    nbytes = 8 * int(np.prod(dims, dtype=np.int64))
    if len(buf) < pos + nbytes:
        raise FormatError(f"payload truncated: need {nbytes} bytes at byte {pos}, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims)
    return arr.astype(np.float64), pos + nbytes


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor in {path}")
    return arr


def write_sidecar(path, meta: dict) -> None:
    """Write ``key=value`` lines in sorted key order."""
    lines = [f"{k}={meta[k]}" for k in sorted(meta)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_sidecar(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays (in the given order) plus a JSON-able ``meta`` block."""
    lines = [f"{CKPT_MAGIC} {CKPT_VERSION}"]
    lines.append("meta " + json.dumps(meta or {}, sort_keys=True, separators=(",", ":")))
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"array name may not contain whitespace: {name!r}")
        arr = np.asarray(arr, dtype=np.float64)
        dims = ",".join(str(d) for d in arr.shape) or "-"
        lines.append(f"array {name} {dims} {offset}")
        offset += arr.size
        chunks.append(arr.ravel())
    lines.append("end")
    blob = np.concatenate(chunks) if chunks else np.zeros(0)
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(tensor_to_bytes(blob))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    stream = io.BytesIO(buf)
    first = stream.readline().decode("ascii", "replace").split()
    if len(first) != 2 or first[0] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    if first[1] != str(CKPT_VERSION):
        raise FormatError(f"{path}: unsupported checkpoint version {first[1]}")
    meta: dict = {}
    manifest = []
    while True:
        raw = stream.readline()
        if not raw:
            raise FormatError(f"{path}: header has no 'end' line")
        try:
            line = raw.decode("ascii").rstrip("\n")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: non-ASCII header line") from exc
        if line == "end":
            break
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            try:
                meta = json.loads(rest)
            except ValueError as exc:
                raise FormatError(f"{path}: malformed meta line") from exc
        elif kind == "array":
            try:
                name, dims, off = rest.split()
                shape = () if dims == "-" else tuple(int(d) for d in dims.split(","))
                manifest.append((name, shape, int(off)))
            except ValueError as exc:
                raise FormatError(f"{path}: malformed array line {line!r}") from exc
        else:
            raise FormatError(f"{path}: unknown header line {line!r}")
    blob, end = tensor_from_bytes(buf, stream.tell())
    if end != len(buf):
        raise FormatError(f"{path}: trailing bytes after payload")
    arrays = {}
    for name, shape, off in manifest:
        n = int(np.prod(shape, dtype=np.int64))
        if off + n > blob.size:
            raise FormatError(f"{path}: array {name} runs past payload end")
        arrays[name] = blob[off : off + n].reshape(shape).copy()
    return arrays, meta
