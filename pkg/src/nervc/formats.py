"""On-disk formats used by the command line: raw clips, checkpoints, PPM frames, split manifests."""

from __future__ import annotations

import os
import struct
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .errors import CorruptionError, DataError, FormatError

CLIP_MAGIC = b"NVRW"
CLIP_VERSION = 1
CLIP_HEADER = struct.Struct("<4sB3xIII")  # 20 bytes

CKPT_MAGIC = b"NVCK"
CKPT_VERSION = 1

SPLITS = ("train", "test")


@contextmanager
def atomic_output(path):
    """Write to ``path.part`` and rename on success; the partial file is removed on failure."""
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    try:
        with open(tmp, "wb") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


# -- NVRW raw clips -------------------------------------------------------


def to_bytes(video: np.ndarray) -> np.ndarray:
    """F x 3 x H x W reals in [0, 1] -> F x H x W x 3 uint8 (round to nearest, clamp)."""
    v = np.asarray(video, dtype=np.float64)
    if v.ndim != 4 or v.shape[1] != 3:
        raise DataError(f"expected an F x 3 x H x W clip, got shape {v.shape}")
    q = np.floor(np.clip(v, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return np.ascontiguousarray(q.transpose(0, 2, 3, 1))


def from_bytes(raw: np.ndarray) -> np.ndarray:
    """F x H x W x 3 uint8 -> F x 3 x H x W float32 via v / 255."""
    return (raw.astype(np.float32) / np.float32(255.0)).transpose(0, 3, 1, 2).copy()


def encode_clip(video: np.ndarray) -> bytes:
    raw = to_bytes(video)
    f, h, w, _ = raw.shape
    return CLIP_HEADER.pack(CLIP_MAGIC, CLIP_VERSION, f, h, w) + raw.tobytes()


def decode_clip(data: bytes) -> np.ndarray:
    if len(data) < CLIP_HEADER.size:
        raise FormatError("clip file shorter than its header")
    magic, version, f, h, w = CLIP_HEADER.unpack_from(data)
    if magic != CLIP_MAGIC:
        raise FormatError(f"not an NVRW clip (magic {magic!r})")
    if version != CLIP_VERSION:
        raise FormatError(f"unsupported NVRW version {version}")
    expected = CLIP_HEADER.size + f * h * w * 3
    if len(data) != expected:
        raise CorruptionError(f"NVRW clip is {len(data)} bytes, header implies {expected}")
    raw = np.frombuffer(data, dtype=np.uint8, offset=CLIP_HEADER.size).reshape(f, h, w, 3)
    return from_bytes(raw)


def write_clip(path, video: np.ndarray) -> int:
    blob = encode_clip(video)
    with atomic_output(path) as fh:
        fh.write(blob)
    return len(blob)


def read_clip(path) -> np.ndarray:
    return decode_clip(Path(path).read_bytes())


# -- NVCK checkpoints -----------------------------------------------------


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        key = name.encode("utf-8")
        arr = np.asarray(arr)
        if len(key) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} cannot be stored")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"not an NVCK checkpoint (magic {bytes(data[:4])!r})")
    try:
        version, count = struct.unpack_from("<HI", data, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported NVCK version {version}")
        pos = 10
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = bytes(data[pos : pos + n]).decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise CorruptionError("truncated tensor name")
            pos += n
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if pos + size > len(data):
                raise CorruptionError(f"tensor {name!r} runs past the end of the file")
            out[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).astype(np.float32).reshape(dims)
            pos += size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptionError(f"truncated or corrupt checkpoint: {exc}") from exc
    if pos != len(data):
        raise CorruptionError(f"{len(data) - pos} trailing bytes after the last tensor")
    return out


def write_checkpoint(path, tensors: dict[str, np.ndarray]) -> int:
    blob = encode_checkpoint(tensors)
    with atomic_output(path) as fh:
        fh.write(blob)
    return len(blob)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


def text_tensor(text: str) -> np.ndarray:
    """UTF-8 bytes as a float vector, so a text document can ride inside a checkpoint."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def tensor_text(arr: np.ndarray) -> str:
    values = np.asarray(arr).ravel()
    if values.size and (values.min() < 0 or values.max() > 255 or np.any(values != np.round(values))):
        raise CorruptionError("embedded text tensor holds non-byte values")
    return values.astype(np.uint8).tobytes().decode("utf-8")


# -- PPM frames -----------------------------------------------------------


def encode_ppm(frame: np.ndarray) -> bytes:
    """One 3 x H x W frame as binary PPM (P6, maxval 255)."""
    raw = to_bytes(np.asarray(frame)[None])[0]
    h, w, _ = raw.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + raw.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        fields.append(data[start:pos])
    if fields[0] != b"P6" or fields[3] != b"255":
        raise FormatError("only binary PPM with maxval 255 is supported")
    w, h = int(fields[1]), int(fields[2])
    body = data[pos + 1 :]
    if len(body) != w * h * 3:
        raise CorruptionError(f"PPM body is {len(body)} bytes, expected {w * h * 3}")
    return from_bytes(np.frombuffer(body, dtype=np.uint8).reshape(1, h, w, 3))[0]


def write_ppm(path, frame: np.ndarray) -> None:
    blob = encode_ppm(frame)
    with atomic_output(path) as fh:
        fh.write(blob)


# -- split manifest -------------------------------------------------------


def format_manifest(entries: list[tuple[str, str]]) -> str:
    lines = []
    for name, split in entries:
        if split not in SPLITS or not name or any(c.isspace() for c in name):
            raise DataError(f"bad manifest entry {name!r} {split!r}")
        lines.append(f"{name} {split}")
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> list[tuple[str, str]]:
    entries = []
    for number, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in SPLITS:
            raise FormatError(f"manifest line {number}: expected '<file> train|test', got {line!r}")
        entries.append((parts[0], parts[1]))
    return entries
