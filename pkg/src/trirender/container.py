"""Binary tensor container and structured-text helpers.

A container file is a 16-byte header (magic ``TRDR``, then little-endian
u32 height, width, channels) followed by ``height * width * channels``
little-endian float32 values in row-major order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptManifest

MAGIC = b"TRDR"
_HEADER = struct.Struct("<4sIII")


def _as_hwc(shape: tuple[int, ...]) -> tuple[int, int, int]:
    if len(shape) == 0:
        return 1, 1, 1
    if len(shape) == 1:
        return 1, shape[0], 1
    if len(shape) == 2:
        return shape[0], shape[1], 1
    rest = int(np.prod(shape[2:]))
    return shape[0], shape[1], rest


def write_tensor(path: str | os.PathLike, array: np.ndarray) -> tuple[int, ...]:
    """Write ``array`` as float32; returns the original shape for manifests."""
    arr = np.asarray(array)
    h, w, c = _as_hwc(arr.shape)
    data = np.ascontiguousarray(arr, dtype="<f4").reshape(-1)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, h, w, c))
        fh.write(data.tobytes())
    return tuple(arr.shape)


def read_tensor(path: str | os.PathLike, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Read a container file.

    Without ``shape`` the result is H x W x C, with a trailing channel of one
    squeezed away (depth images come back as H x W).
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptManifest(f"{path}: truncated header")
    magic, h, w, c = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptManifest(f"{path}: bad magic {magic!r}")
    n = h * w * c
    if len(raw) != _HEADER.size + 4 * n:
        raise CorruptManifest(f"{path}: expected {n} floats, file has {len(raw) - _HEADER.size} bytes")
    arr = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(np.float32)
    if shape is not None:
        if int(np.prod(shape)) != n:
            raise CorruptManifest(f"{path}: shape {shape} does not match {n} values")
        return arr.reshape(shape)
    arr = arr.reshape(h, w, c)
    return arr[..., 0] if c == 1 else arr


def write_json(path: str | os.PathLike, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: str | os.PathLike):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptManifest(f"{path}: {exc}") from exc


def write_preview_png(path: str | os.PathLike, image: np.ndarray) -> None:
    """8-bit preview of an image in [0, 1] (grayscale or RGB)."""
    from PIL import Image

    img = np.clip(np.nan_to_num(np.asarray(image, dtype=np.float64)), 0.0, 1.0)
    Image.fromarray((img * 255.0 + 0.5).astype(np.uint8)).save(path)
