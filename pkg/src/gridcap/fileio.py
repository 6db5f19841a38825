"""Binary file formats: parameter checkpoints, grid-feature files, images.

All multi-byte integers are little-endian; all floating payloads are raw
little-endian float64, so round-trips are bit-exact.  Malformed input raises
:class:`FormatError` naming the byte offset where parsing failed.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "FormatError",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "save_checkpoint",
    "load_checkpoint",
    "FEATURE_MAGIC",
    "save_feature_file",
    "load_feature_file",
    "IMAGE_MAGIC",
    "save_image_tensor",
    "load_image_tensor",
    "save_ppm",
    "load_ppm",
    "load_image",
]


class FormatError(ValueError):
    """A file does not match its declared binary layout."""


CHECKPOINT_MAGIC = b"GCKP"
CHECKPOINT_VERSION = 1
FEATURE_MAGIC = b"GFEA"
FEATURE_VERSION = 1
IMAGE_MAGIC = b"GIMG"
IMAGE_VERSION = 1


class _Reader:
    def __init__(self, blob: bytes, label: str):
        self.blob = blob
        self.pos = 0
        self.label = label

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(
                f"{self.label}: truncated while reading {what} at byte offset {self.pos}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


# -- parameter checkpoints ---------------------------------------------------


def save_checkpoint(path, header: dict, params: dict[str, np.ndarray]) -> None:
    """Write a flat name -> array archive with a JSON header.

    ``header`` must be JSON-serializable (it carries the model configuration).
    Parameter order is preserved; payloads are raw little-endian doubles.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(head)))
    buf.write(head)
    buf.write(struct.pack("<Q", len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        nm = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nm)))
        buf.write(nm)
        buf.write(struct.pack("<I", arr.ndim))
        for extent in arr.shape:
            buf.write(struct.pack("<Q", extent))
        buf.write(arr.tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (header, name -> float64 array)."""
    blob = Path(path).read_bytes()
    r = _Reader(blob, str(path))
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic at byte offset 0)")
    version = r.u32("format version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    head_len = r.u64("header length")
    try:
        header = json.loads(r.take(head_len, "header").decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad header JSON ({exc})") from exc
    count = r.u64("parameter count")
    params: dict[str, np.ndarray] = {}
    for i in range(count):
        nm_len = r.u32(f"name length of parameter {i}")
        name = r.take(nm_len, f"name of parameter {i}").decode("utf-8")
        ndim = r.u32(f"rank of {name}")
        shape = tuple(r.u64(f"extent of {name}") for _ in range(ndim))
        n_items = int(np.prod(shape)) if shape else 1
        raw = r.take(8 * n_items, f"payload of {name}")
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return header, params


# -- grid-feature files -------------------------------------------------------


def save_feature_file(path, grid: np.ndarray, grid_h: int, grid_w: int) -> None:
    """Write a [grid_h*grid_w, D] feature matrix (doubles after the header)."""
    grid = np.asarray(grid, dtype="<f8")
    if grid.ndim != 2 or grid.shape[0] != grid_h * grid_w:
        raise FormatError(f"feature matrix {grid.shape} does not match grid {grid_h}x{grid_w}")
    buf = io.BytesIO()
    buf.write(FEATURE_MAGIC)
    buf.write(struct.pack("<I", FEATURE_VERSION))
    buf.write(struct.pack("<III", grid_h, grid_w, grid.shape[1]))
    buf.write(grid.tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


def load_feature_file(path) -> tuple[np.ndarray, int, int]:
    """Read a feature file; returns (grid [m, D], grid_h, grid_w)."""
    blob = Path(path).read_bytes()
    r = _Reader(blob, str(path))
    if r.take(4, "magic") != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a feature file (bad magic at byte offset 0)")
    version = r.u32("format version")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature version {version}")
    grid_h = r.u32("grid height")
    grid_w = r.u32("grid width")
    dim = r.u32("feature dim")
    raw = r.take(8 * grid_h * grid_w * dim, "feature payload")
    grid = np.frombuffer(raw, dtype="<f8").reshape(grid_h * grid_w, dim).astype(np.float64)
    return grid, grid_h, grid_w


# -- images -------------------------------------------------------------------


def save_image_tensor(path, img: np.ndarray) -> None:
    """Write an [H, W, C] float image with values in [0, 1] as raw doubles."""
    img = np.asarray(img, dtype="<f8")
    if img.ndim != 3:
        raise FormatError(f"image tensor must be [H, W, C], got shape {img.shape}")
    buf = io.BytesIO()
    buf.write(IMAGE_MAGIC)
    buf.write(struct.pack("<I", IMAGE_VERSION))
    buf.write(struct.pack("<III", *img.shape))
    buf.write(img.tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


def load_image_tensor(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    r = _Reader(blob, str(path))
    if r.take(4, "magic") != IMAGE_MAGIC:
        raise FormatError(f"{path}: not an image tensor file (bad magic at byte offset 0)")
    version = r.u32("format version")
    if version != IMAGE_VERSION:
        raise FormatError(f"{path}: unsupported image version {version}")
    h = r.u32("height")
    w = r.u32("width")
    c = r.u32("channels")
    raw = r.take(8 * h * w * c, "pixel payload")
    return np.frombuffer(raw, dtype="<f8").reshape(h, w, c).astype(np.float64)


def save_ppm(path, img: np.ndarray) -> None:
    """Write a binary P6 portable pixmap (8-bit, 3 channels)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"PPM needs [H, W, 3], got shape {img.shape}")
    h, w, _ = img.shape
    payload = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(payload.tobytes(order="C"))


def load_ppm(path) -> np.ndarray:
    """Read a binary P6 pixmap into [H, W, 3] floats in [0, 1]."""
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary P6 pixmap")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header at byte offset {pos}")
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    need = w * h * 3
    if len(blob) - pos < need:
        raise FormatError(f"{path}: truncated PPM payload at byte offset {len(blob)}")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def load_image(path) -> np.ndarray:
    """Read either a raw image tensor or a P6 pixmap, by extension then magic."""
    blob_head = Path(path).open("rb").read(4)
    if blob_head == IMAGE_MAGIC:
        return load_image_tensor(path)
    if blob_head[:2] == b"P6":
        return load_ppm(path)
    raise FormatError(f"{path}: unrecognized image format (magic {blob_head!r})")
