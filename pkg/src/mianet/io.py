"""File formats: MIAT tensors, PGM images and word2vec text embeddings."""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MIAT_MAGIC = b"MIAT"


class FormatError(ValueError):
    pass


def write_miat(stream: BinaryIO, t: np.ndarray) -> None:
    t = np.asarray(t)
    if not 1 <= t.ndim <= 4:
        raise FormatError(f"MIAT supports rank 1-4, got {t.ndim}")
    stream.write(MIAT_MAGIC)
    stream.write(struct.pack("<I", t.ndim))
    stream.write(struct.pack(f"<{t.ndim}I", *t.shape))
    stream.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def read_miat(stream: BinaryIO) -> np.ndarray:
    """Read one MIAT tensor; the payload is widened to float64."""
    magic = stream.read(4)
    if magic != MIAT_MAGIC:
        raise FormatError(f"bad MIAT magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(stream, 4))
    if not 1 <= rank <= 4:
        raise FormatError(f"bad MIAT rank {rank}")
    dims = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank))
    count = int(np.prod(dims))
    payload = _read_exact(stream, 4 * count)
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise FormatError("truncated file")
    return data


def miat_bytes(t: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_miat(buf, t)
    return buf.getvalue()


def save_miat(path: str | Path, t: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_miat(fh, t)


def load_miat(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_miat(fh)


def save_pgm(path: str | Path, img: np.ndarray) -> None:
    """Write an 8-bit binary PGM (P5).  ``img`` holds integers in [0, 255]."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise FormatError(f"PGM needs a 2-D array, got shape {img.shape}")
    h, w = img.shape
    data = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def load_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(x) for x in fields[1:])
    if maxval > 255:
        raise FormatError(f"{path}: 16-bit PGM not supported")
    pos += 1
    data = np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise FormatError(f"{path}: truncated PGM")
    return data.reshape(h, w).copy()


def save_mask_pgm(path: str | Path, mask: np.ndarray) -> None:
    save_pgm(path, np.asarray(mask, dtype=np.uint8) * 255)


def load_mask_pgm(path: str | Path) -> np.ndarray:
    return (load_pgm(path) >= 128).astype(np.uint8)


def save_unit_map_pgm(path: str | Path, m: np.ndarray) -> None:
    """Write a map with values in [0, 1] scaled by 255."""
    save_pgm(path, np.clip(np.asarray(m), 0.0, 1.0) * 255.0)


def load_word2vec_text(path: str | Path) -> tuple[int, dict[str, np.ndarray]]:
    """Parse a word2vec text file into ``(dimension, {token: vector})``."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise FormatError(f"{path}: header must be '<count> <dim>'")
        count, dim = int(header[0]), int(header[1])
        vectors: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").rstrip(" ").split(" ")
            if not parts or parts == [""]:
                continue
            if len(parts) != dim + 1:
                raise FormatError(
                    f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}"
                )
            vectors[parts[0]] = np.array([float(x) for x in parts[1:]])
    if len(vectors) != count:
        raise FormatError(f"{path}: header says {count} tokens, found {len(vectors)}")
    return dim, vectors


def save_word2vec_text(path: str | Path, vectors: dict[str, np.ndarray]) -> None:
    dims = {len(v) for v in vectors.values()}
    if len(dims) != 1:
        raise FormatError("all vectors must share one dimension")
    (dim,) = dims
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(vectors)} {dim}\n")
        for token, vec in vectors.items():
            fh.write(token + " " + " ".join(repr(float(x)) for x in vec) + "\n")
