"""Binary tensor archive: named numpy arrays plus a JSON metadata blob.

Layout (all integers little-endian):

    magic    4 bytes  b"CMF1"
    version  u16
    meta     u32 byte length, then UTF-8 JSON
    count    u32
    entries  repeated:
        name   u16 byte length, then UTF-8
        dtype  u8 code (see DTYPE_CODES)
        ndim   u8
        dims   ndim x u64
        data   row-major payload

Used for model checkpoints (named weight tensors) and for multi-channel
images that do not fit standard image formats.
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CMF1"
VERSION = 1

DTYPE_CODES = {
    np.dtype("float32"): 0,
    np.dtype("float64"): 1,
    np.dtype("int32"): 2,
    np.dtype("int64"): 3,
    np.dtype("uint8"): 4,
    np.dtype("int16"): 5,
    np.dtype("uint16"): 6,
    np.dtype("bool"): 7,
}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}


class ArchiveError(Exception):
    """Raised when an archive cannot be written or read back intact."""


def save_archive(path, tensors: dict, meta: dict | None = None) -> None:
    """Write `tensors` (name -> ndarray) to `path`; keys are sorted for stable bytes."""
    path = Path(path)
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(meta_bytes)))
    chunks.append(meta_bytes)
    chunks.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in DTYPE_CODES:
            raise ArchiveError(f"unsupported dtype {arr.dtype} for tensor '{name}'")
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<BB", DTYPE_CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        chunks.append(little.tobytes(order="C"))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ArchiveError(
                f"truncated archive {self.path}: wanted {n} bytes at offset "
                f"{self.pos}, file has {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_archive(path) -> tuple[dict, dict]:
    """Read an archive; returns (tensors, meta). Fails closed on any corruption."""
    path = Path(path)
    if not path.exists():
        raise ArchiveError(f"archive not found: {path}")
    rd = _Reader(path.read_bytes(), path)
    if rd.take(4) != MAGIC:
        raise ArchiveError(f"bad magic in {path}: not a tensor archive")
    (version,) = rd.unpack("<H")
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version} in {path}")
    (meta_len,) = rd.unpack("<I")
    try:
        meta = json.loads(rd.take(meta_len).decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"corrupt metadata in {path}: {exc}") from exc
    (count,) = rd.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = rd.unpack("<H")
        name = rd.take(name_len).decode("utf-8")
        code, ndim = rd.unpack("<BB")
        if code not in CODE_DTYPES:
            raise ArchiveError(f"unknown dtype code {code} for tensor '{name}' in {path}")
        shape = rd.unpack(f"<{ndim}Q")
        dtype = CODE_DTYPES[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        data = rd.take(n_bytes)
        arr = np.frombuffer(data, dtype=dtype.newbyteorder("<")).astype(dtype, copy=True)
        tensors[name] = arr.reshape(shape)
    if rd.pos != len(rd.buf):
        raise ArchiveError(f"trailing garbage ({len(rd.buf) - rd.pos} bytes) in {path}")
    return tensors, meta


def save_image(path, image: np.ndarray, meta: dict | None = None) -> None:
    """Store a C x H x W image as a single-tensor archive."""
    if image.ndim != 3:
        raise ArchiveError(f"image must be C x H x W, got shape {image.shape}")
    save_archive(path, {"image": image}, meta)


def load_image(path) -> np.ndarray:
    tensors, _ = load_archive(path)
    if "image" not in tensors:
        raise ArchiveError(f"{path} holds no 'image' tensor")
    return tensors["image"]
