"""Binary tensor files (``BNT1``) and checkpoint directories.

Tensor file layout::

    b"BNT1" | u8 dtype (0 = f32) | u8 rank | rank x u32 LE dims | f32 LE payload

A checkpoint is a directory of tensor files plus ``manifest.txt``.  Each
manifest line is tab-separated: ``param <name> <file>``, ``buffer <name> <file>``
or ``meta <key> <value>``.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"BNT1"
DTYPE_F32 = 0
MANIFEST = "manifest.txt"


class TensorFormatError(ValueError):
    """A tensor file or manifest failed to parse."""


def encode_tensor(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    if arr.ndim > 255:
        raise ValueError("rank above 255 is not representable")
    head = MAGIC + struct.pack("<BB", DTYPE_F32, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise TensorFormatError(f"{source}: bad magic, not a BNT1 tensor file")
    dtype, rank = struct.unpack_from("<BB", buf, 4)
    if dtype != DTYPE_F32:
        raise TensorFormatError(f"{source}: unsupported dtype code {dtype}")
    head = 6 + 4 * rank
    if len(buf) < head:
        raise TensorFormatError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 6)
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    if len(buf) - head != expected:
        raise TensorFormatError(
            f"{source}: payload is {len(buf) - head} bytes, shape {tuple(dims)} needs {expected}"
        )
    return np.frombuffer(buf, dtype="<f4", offset=head).reshape(dims).astype(np.float32)


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise TensorFormatError(f"{path}: {exc.strerror}") from exc
    return decode_tensor(buf, str(path))


def _safe_filename(name: str) -> str:
    return name.replace(os.sep, "_") + ".bnt"


def save_checkpoint(directory, params: dict, buffers: dict | None = None, meta: dict | None = None) -> None:
    """Write named parameter and buffer arrays plus string metadata."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, value in (meta or {}).items():
        lines.append(f"meta\t{key}\t{value}")
    for kind, table in (("param", params), ("buffer", buffers or {})):
        for name, arr in table.items():
            fname = _safe_filename(name)
            write_tensor(directory / fname, arr)
            lines.append(f"{kind}\t{name}\t{fname}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")


def load_checkpoint(directory) -> tuple[dict, dict, dict]:
    """Return ``(params, buffers, meta)`` from a checkpoint directory."""
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.is_file():
        raise TensorFormatError(f"{manifest}: checkpoint manifest not found")
    params: dict = {}
    buffers: dict = {}
    meta: dict = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise TensorFormatError(f"{manifest}:{lineno}: expected 3 tab-separated fields")
        kind, name, value = parts
        if kind == "meta":
            meta[name] = value
        elif kind in ("param", "buffer"):
            (params if kind == "param" else buffers)[name] = read_tensor(directory / value)
        else:
            raise TensorFormatError(f"{manifest}:{lineno}: unknown entry kind {kind!r}")
    return params, buffers, meta
