# cbam/services/serialization.py
"""
Binary formats shared by checkpoints, datasets and heatmaps.

CBT1 tensor:  b"CBT1", u32 rank, rank × u32 extents, float64 payload (all little-endian).
CBDS dataset: b"CBDS", u32 M, C0, H, W, M·C0·H·W float64 images, M × u32 labels.
PGM / PPM:    binary P5 / P6 with maxval 255.
"""
import json
from pathlib import Path

import numpy as np

from cbam.exceptions import BadMagic, ConfigError, IoFailure, TruncatedFile
from cbam.services.tensor import Tensor

TENSOR_MAGIC = b"CBT1"
DATASET_MAGIC = b"CBDS"
_U32 = np.dtype("<u4")
_F64 = np.dtype("<f8")


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def write_bytes(path, payload: bytes):
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


class _Reader:
    """Cursor over a byte buffer that raises TruncatedFile on short reads."""

    def __init__(self, buf: bytes, source):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, dtype: np.dtype, count: int) -> np.ndarray:
        nbytes = dtype.itemsize * count
        if self.pos + nbytes > len(self.buf):
            raise TruncatedFile(
                f"{self.source}: need {nbytes} bytes at offset {self.pos}, "
                f"only {len(self.buf) - self.pos} left"
            )
        out = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.pos)
        self.pos += nbytes
        return out

    def magic(self, expected: bytes):
        head = self.buf[:len(expected)]
        if head != expected:
            raise BadMagic(f"{self.source}: expected magic {expected!r}, found {head!r}")
        self.pos = len(expected)


# --- CBT1 tensors -----------------------------------------------------------
def encode_tensor(t: Tensor) -> bytes:
    header = np.array([t.ndim, *t.shape], dtype=_U32).tobytes()
    return TENSOR_MAGIC + header + t.data.astype(_F64).tobytes()


def decode_tensor(buf: bytes, source="<bytes>") -> Tensor:
    reader = _Reader(buf, source)
    reader.magic(TENSOR_MAGIC)
    rank = int(reader.take(_U32, 1)[0])
    shape = tuple(int(n) for n in reader.take(_U32, rank))
    payload = reader.take(_F64, int(np.prod(shape)) if shape else 1)
    return Tensor(payload.reshape(shape).astype(np.float64))


def write_tensor(t: Tensor, path):
    write_bytes(path, encode_tensor(t))


def read_tensor(path) -> Tensor:
    return decode_tensor(_read_bytes(path), source=path)


# --- CBDS datasets ----------------------------------------------------------
def write_cbds(path, images: np.ndarray, labels):
    m, c0, h, w = images.shape
    labels = np.asarray(labels, dtype=_U32)
    payload = (
        DATASET_MAGIC
        + np.array([m, c0, h, w], dtype=_U32).tobytes()
        + np.ascontiguousarray(images, dtype=_F64).tobytes()
        + labels.tobytes()
    )
    write_bytes(path, payload)


def read_cbds(path) -> tuple:
    """Return (images M×C0×H×W float64 array, labels int list)."""
    reader = _Reader(_read_bytes(path), path)
    reader.magic(DATASET_MAGIC)
    m, c0, h, w = (int(n) for n in reader.take(_U32, 4))
    images = reader.take(_F64, m * c0 * h * w).reshape(m, c0, h, w).astype(np.float64)
    labels = [int(n) for n in reader.take(_U32, m)]
    return images, labels


# --- Netpbm images ----------------------------------------------------------
def encode_pgm(pixels: np.ndarray) -> bytes:
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.astype(np.uint8).tobytes()


def encode_ppm(pixels: np.ndarray) -> bytes:
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.astype(np.uint8).tobytes()


def decode_netpbm(buf: bytes, source="<bytes>") -> np.ndarray:
    """Parse a binary P5/P6 image into an H×W (or H×W×3) uint8 array."""
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFile(f"{source}: incomplete netpbm header")
        fields.append(buf[start:pos])
    pos += 1  # single whitespace after maxval
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise BadMagic(f"{source}: expected P5 or P6, found {magic!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise BadMagic(f"{source}: non-numeric netpbm header field in {fields[1:]!r}") from None
    if maxval != 255:
        raise BadMagic(f"{source}: only maxval 255 is supported, found {maxval}")
    depth = 1 if magic == b"P5" else 3
    need = w * h * depth
    if len(buf) - pos < need:
        raise TruncatedFile(f"{source}: image payload needs {need} bytes")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return pixels.reshape((h, w) if depth == 1 else (h, w, 3))


def read_netpbm(path) -> np.ndarray:
    return decode_netpbm(_read_bytes(path), source=path)


# --- JSON -------------------------------------------------------------------
def read_json(path):
    try:
        return json.loads(_read_bytes(path).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def write_json(path, payload):
    text = json.dumps(payload, indent=2, sort_keys=False, ensure_ascii=False) + "\n"
    write_bytes(path, text.encode("utf-8"))


def write_text(path, text: str):
    write_bytes(path, text.encode("utf-8"))
