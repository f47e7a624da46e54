"""PNG images and masks, plus the binary trajectory and attention dump formats.

Both dump formats are little-endian float32 after a short header:

``TFTRAJ1\\0`` | uint32 header length | JSON header | frames ``(n, c, h, w)``

``TFATTN1\\0`` | uint32 block count | per block: int32 layer, int32 step,
uint32 rows, uint32 cols, then ``rows * cols`` floats
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Iterable, Tuple

import numpy as np
from PIL import Image

from .errors import InputError

TRAJ_MAGIC = b"TFTRAJ1\0"
ATTN_MAGIC = b"TFATTN1\0"


def _open(path):
    try:
        return Image.open(path)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc


def load_image(path) -> np.ndarray:
    """8-bit RGB PNG -> float array ``(3, H, W)`` in [0, 1]."""
    with _open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def to_uint8(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image.transpose(1, 2, 0)
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, image) -> None:
    try:
        Image.fromarray(to_uint8(image)).save(path, format="PNG")
    except OSError as exc:
        raise InputError(f"cannot write image {path}: {exc}") from exc


def load_mask(path) -> np.ndarray:
    """Grayscale PNG -> 0/1 array; pixels above 127 count as set."""
    with _open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.uint8)


def save_mask(path, mask) -> None:
    try:
        Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path, format="PNG")
    except OSError as exc:
        raise InputError(f"cannot write mask {path}: {exc}") from exc


def box_mask(shape, box) -> np.ndarray:
    """Rectangle ``(top, left, height, width)`` as a 0/1 mask of ``shape``."""
    top, left, height, width = (int(v) for v in box)
    H, W = shape
    if height < 1 or width < 1 or top < 0 or left < 0 or top + height > H or left + width > W:
        raise InputError(f"box {tuple(box)} does not fit a {H}x{W} image")
    m = np.zeros(shape, dtype=np.uint8)
    m[top:top + height, left:left + width] = 1
    return m


def write_trajectory(path, frames, meta=None) -> None:
    frames = np.ascontiguousarray(np.stack([np.asarray(f) for f in frames]), dtype="<f4")
    header = dict(meta or {}, shape=list(frames.shape))
    blob = json.dumps(header, sort_keys=True).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(TRAJ_MAGIC + struct.pack("<I", len(blob)) + blob + frames.tobytes())
    except OSError as exc:
        raise InputError(f"cannot write trajectory {path}: {exc}") from exc


def read_trajectory(path) -> Tuple[np.ndarray, dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read trajectory {path}: {exc}") from exc
    if raw[:8] != TRAJ_MAGIC:
        raise InputError(f"{path} is not a trajectory dump")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n])
    data = np.frombuffer(raw[12 + n:], dtype="<f4")
    shape = tuple(header["shape"])
    if data.size != int(np.prod(shape)):
        raise InputError(f"{path} is truncated")
    return data.reshape(shape), header


def write_attention(path, blocks: Iterable[Tuple[int, int, np.ndarray]]) -> int:
    """Write ``(layer, step, map)`` blocks; returns the block count."""
    blocks = list(blocks)
    parts = [ATTN_MAGIC, struct.pack("<I", len(blocks))]
    for layer, t, A in blocks:
        A = np.ascontiguousarray(A, dtype="<f4")
        if A.ndim != 2:
            raise InputError(f"attention block ({layer}, {t}) must be 2-D")
        parts.append(struct.pack("<iiII", layer, t, *A.shape))
        parts.append(A.tobytes())
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise InputError(f"cannot write attention dump {path}: {exc}") from exc
    return len(blocks)


def read_attention(path) -> Dict[Tuple[int, int], np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read attention dump {path}: {exc}") from exc
    if raw[:8] != ATTN_MAGIC:
        raise InputError(f"{path} is not an attention dump")
    (count,) = struct.unpack("<I", raw[8:12])
    pos, out = 12, {}
    for _ in range(count):
        if pos + 16 > len(raw):
            raise InputError(f"{path} is truncated")
        layer, t, rows, cols = struct.unpack("<iiII", raw[pos:pos + 16])
        pos += 16
        size = 4 * rows * cols
        if pos + size > len(raw):
            raise InputError(f"{path} is truncated")
        out[(layer, t)] = np.frombuffer(raw[pos:pos + size], dtype="<f4").reshape(rows, cols)
        pos += size
    return out


def save_gray(path, image) -> None:
    """2-D float array in [0, 1] as an 8-bit grayscale PNG."""
    try:
        Image.fromarray(to_uint8(image)).save(path, format="PNG")
    except OSError as exc:
        raise InputError(f"cannot write image {path}: {exc}") from exc
