"""Binary file formats for tensors, weights, images and label maps.

* CTNSR — raw tensor exchange: magic ``CTNSR1``, u32 little-endian rank,
  rank×u32 extents, then row-major little-endian f32 data.
* CANW1 — weight checkpoints: magic ``CANW1\\0``, u32 tensor count, then
  per tensor a u16 name length, the UTF-8 dotted name, u32 rank, extents,
  f32 data.
* PPM (P6) / PGM (P5) — 8-bit binary images and label maps; label maps
  reserve 255 for the ignore label.

All readers validate magic bytes, extents and exact payload length and
raise :class:`~canet.errors.FormatError` naming the offending entry.
"""

from __future__ import annotations

import struct
from typing import Dict, Iterable, Tuple

import numpy as np

from .errors import FormatError

CTNSR_MAGIC = b"CTNSR1"
CANW_MAGIC = b"CANW1\0"
_MAX_RANK = 8


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"{what}: expected {n} bytes, got {len(data)} (truncated file)")
    return data


def _read_extents(f, path: str) -> Tuple[int, ...]:
    (rank,) = struct.unpack("<I", _read_exact(f, 4, f"{path}: rank"))
    if rank > _MAX_RANK:
        raise FormatError(f"{path}: implausible rank {rank}")
    extents = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"{path}: extents"))
    if any(e == 0 for e in extents):
        raise FormatError(f"{path}: zero extent in shape {extents}")
    return extents


# ---------------------------------------------------------------------------
# CTNSR


def save_ctnsr(path: str, array: np.ndarray) -> None:
    # np.asarray with order="C" keeps rank-0 arrays rank 0, where
    # ascontiguousarray would quietly promote them to shape (1,).
    arr = np.asarray(array, dtype="<f4", order="C")
    with open(path, "wb") as f:
        f.write(CTNSR_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def load_ctnsr(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic = _read_exact(f, len(CTNSR_MAGIC), f"{path}: magic")
        if magic != CTNSR_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {CTNSR_MAGIC!r}")
        extents = _read_extents(f, path)
        count = int(np.prod(extents, dtype=np.int64))
        data = _read_exact(f, 4 * count, f"{path}: {count} float payload")
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    return np.frombuffer(data, dtype="<f4").reshape(extents).copy()


# ---------------------------------------------------------------------------
# CANW1 weight checkpoints


def save_canw(path: str, named_arrays: Iterable[Tuple[str, np.ndarray]]) -> None:
    entries = list(named_arrays)
    with open(path, "wb") as f:
        f.write(CANW_MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for name, array in entries:
            raw = name.encode("utf-8")
            arr = np.asarray(array, dtype="<f4", order="C")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_canw(path: str) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = _read_exact(f, len(CANW_MAGIC), f"{path}: magic")
        if magic != CANW_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {CANW_MAGIC!r}")
        (count,) = struct.unpack("<I", _read_exact(f, 4, f"{path}: tensor count"))
        for i in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, f"{path}: entry {i} name length"))
            name = _read_exact(f, name_len, f"{path}: entry {i} name").decode("utf-8")
            extents = _read_extents(f, f"{path}: {name}")
            n = int(np.prod(extents, dtype=np.int64))
            data = _read_exact(f, 4 * n, f"{path}: {name} payload")
            if name in out:
                raise FormatError(f"{path}: duplicate tensor name {name!r}")
            out[name] = np.frombuffer(data, dtype="<f4").reshape(extents).copy()
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after last tensor")
    return out


# ---------------------------------------------------------------------------
# PPM / PGM


def _read_pnm_tokens(f, n: int, path: str) -> list:
    """Read `n` whitespace-separated header tokens, skipping # comments."""
    tokens: list = []
    while len(tokens) < n:
        ch = f.read(1)
        if not ch:
            raise FormatError(f"{path}: truncated header")
        if ch in b" \t\r\n":
            continue
        if ch == b"#":
            while ch and ch != b"\n":
                ch = f.read(1)
            continue
        tok = bytearray(ch)
        while True:
            ch = f.read(1)
            if not ch or ch in b" \t\r\n":
                break
            tok.extend(ch)
        tokens.append(bytes(tok))
    return tokens


def _load_pnm(path: str, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as f:
        got = _read_exact(f, 2, f"{path}: magic")
        if got != magic:
            raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
        try:
            w, h, maxval = (int(t) for t in _read_pnm_tokens(f, 3, path))
        except ValueError:
            raise FormatError(f"{path}: non-numeric header field") from None
        if maxval != 255:
            raise FormatError(f"{path}: only 8-bit images supported, maxval={maxval}")
        if w < 1 or h < 1:
            raise FormatError(f"{path}: invalid image size {w}×{h}")
        data = _read_exact(f, h * w * channels, f"{path}: pixel payload")
    arr = np.frombuffer(data, dtype=np.uint8)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def save_ppm(path: str, image: np.ndarray) -> None:
    """Write an H×W×3 uint8 array as binary PPM (P6)."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise FormatError(f"PPM wants H×W×3 uint8, got {img.shape} {img.dtype}")
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(np.ascontiguousarray(img).tobytes())


def load_ppm(path: str) -> np.ndarray:
    return _load_pnm(path, b"P6", 3)


def save_pgm(path: str, image: np.ndarray) -> None:
    """Write an H×W uint8 array as binary PGM (P5)."""
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise FormatError(f"PGM wants H×W uint8, got {img.shape} {img.dtype}")
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(np.ascontiguousarray(img).tobytes())


def load_pgm(path: str) -> np.ndarray:
    return _load_pnm(path, b"P5", 1)
