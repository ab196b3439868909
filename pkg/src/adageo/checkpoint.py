"""Checkpoint and descriptor-matrix file formats.

Checkpoint (``*.ckpt``)::

    b"ADAGCKPT" | u32 version=1 | u32 count
    count x ( u32 name_len | utf-8 name | u32 ndim | ndim x u64 dim | prod(dims) x f64 )

all little-endian, plus a ``<path>.json`` sidecar with hyperparameters.

Descriptor dump (``*.desc``)::

    b"ADAGDESC" | u32 header_len | utf-8 JSON header | count x dim x f64

The JSON header carries ``count``, ``dim`` and the row ``ids``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"ADAGCKPT"
DESC_MAGIC = b"ADAGDESC"


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(path, tensors: dict[str, np.ndarray], hyper: dict | None = None) -> Path:
    path = Path(path)
    parts = [CKPT_MAGIC, struct.pack("<II", 1, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype("<f8").tobytes(order="C"))
    path.write_bytes(b"".join(parts))
    sidecar_path(path).write_text(json.dumps(hyper or {}, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        size = int(np.prod(dims)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(dims).astype(np.float64)
        off += 8 * size
    side = sidecar_path(path)
    hyper = json.loads(side.read_text()) if side.exists() else {}
    return out, hyper


def save_descriptors(path, ids, matrix: np.ndarray, extra: dict | None = None) -> Path:
    matrix = np.asarray(matrix, dtype=np.float64)
    ids = [int(i) for i in ids]
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise ValueError(f"descriptor matrix {matrix.shape} does not match {len(ids)} ids")
    header = {"count": matrix.shape[0], "dim": matrix.shape[1], "ids": ids, "dtype": "<f8"}
    header.update(extra or {})
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.write_bytes(DESC_MAGIC + struct.pack("<I", len(raw)) + raw + matrix.astype("<f8").tobytes())
    return path


def load_descriptors(path) -> tuple[list[int], np.ndarray, dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != DESC_MAGIC:
        raise ValueError(f"{path}: not a descriptor file")
    (n,) = struct.unpack_from("<I", buf, 8)
    header = json.loads(buf[12:12 + n].decode("utf-8"))
    mat = np.frombuffer(buf, dtype="<f8", offset=12 + n).reshape(header["count"], header["dim"])
    return header["ids"], mat.astype(np.float64), header
